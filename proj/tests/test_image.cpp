#include <filesystem>

#include "doctest.h"
#include "padapter/errors.hpp"
#include "padapter/image.hpp"
#include "padapter/rng.hpp"
#include "support.hpp"

using namespace padapter;

namespace {

Tensor random_bytes_image(std::size_t c, std::size_t h, std::size_t w, Rng& rng) {
    Tensor t({c, h, w});
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<double>(rng.below(256)) / 255.0;
    return t;
}

std::vector<std::uint8_t> bytes_of(const std::string& s) { return {s.begin(), s.end()}; }

}  // namespace

TEST_CASE("to_byte rounds half up and clamps") {
    CHECK(to_byte(0.0) == 0);
    CHECK(to_byte(1.0) == 255);
    CHECK(to_byte(-0.5) == 0);
    CHECK(to_byte(2.0) == 255);
    CHECK(to_byte(0.5) == 128);
    CHECK(to_byte(1.0 / 255.0) == 1);
    CHECK(to_byte(0.4 / 255.0) == 0);
}

TEST_CASE("netpbm encode and decode round trip exactly on byte-valued images") {
    Rng rng(3);
    for (std::size_t c : {1u, 3u}) {
        const Tensor img = random_bytes_image(c, 7, 5, rng);
        const auto bytes = encode_netpbm(img);
        CHECK(bytes[0] == 'P');
        CHECK(bytes[1] == (c == 1 ? '5' : '6'));
        const Tensor back = decode_netpbm(bytes);
        CHECK(back.shape() == img.shape());
        CHECK(max_abs_diff(back, img) < 1e-15);
        CHECK(encode_netpbm(back) == bytes);
    }
}

TEST_CASE("netpbm header with comments is accepted") {
    auto b = bytes_of("P5\n# note\n2 1\n255\n");
    b.push_back(0);
    b.push_back(255);
    const Tensor t = decode_netpbm(b);
    CHECK(t.shape() == Shape{1, 1, 2});
    CHECK(t[1] == 1.0);
}

TEST_CASE("netpbm malformed inputs are format errors") {
    CHECK_THROWS_AS(decode_netpbm(bytes_of("P3\n1 1\n255\n0 0 0")), FormatError);
    CHECK_THROWS_AS(decode_netpbm(bytes_of("P5\n1 1\n65535\n\x01\x02")), FormatError);
    CHECK_THROWS_AS(decode_netpbm(bytes_of("P5\n2 2\n255\n\x01")), FormatError);
    CHECK_THROWS_AS(decode_netpbm(bytes_of("P5\n0 2\n255\n")), FormatError);
    CHECK_THROWS_AS(decode_netpbm(bytes_of("P6\n2")), FormatError);
    CHECK_THROWS_AS(decode_netpbm({}), FormatError);
    CHECK_THROWS_AS(encode_netpbm(Tensor({2, 3, 3})), ShapeError);
}

TEST_CASE("mask files hold only 0 and 255") {
    const auto dir = testutil::scratch_dir("image_mask");
    Tensor m({1, 4, 4});
    m.at(0, 1, 2) = 1.0;
    m.at(0, 3, 0) = 1.0;
    write_mask(dir / "m.pgm", m);
    CHECK(read_mask(dir / "m.pgm") == m);
    Tensor gray({1, 2, 2}, 0.5);
    write_netpbm(dir / "g.pgm", gray);
    CHECK_THROWS_AS(read_mask(dir / "g.pgm"), FormatError);
    CHECK_THROWS_AS(read_netpbm(dir / "missing.ppm"), IoError);
    CHECK_THROWS_AS(write_mask(dir / "bad.pgm", gray), ContractError);
}

TEST_CASE("apply_mask zeroes holes in every channel") {
    Tensor img({3, 2, 2}, 0.7);
    Tensor m({1, 2, 2});
    m.at(0, 0, 1) = 1.0;
    const Tensor out = apply_mask(img, m);
    for (std::size_t c = 0; c < 3; ++c) {
        CHECK(out.at(c, 0, 1) == 0.0);
        CHECK(out.at(c, 1, 1) == 0.7);
    }
    CHECK_THROWS_AS(apply_mask(img, Tensor({1, 3, 2})), ShapeError);
    CHECK(expand_mask(m, 3).at(2, 0, 1) == 1.0);
}

TEST_CASE("mask predicates") {
    Tensor m({1, 3, 3});
    CHECK(mask_is_empty(m));
    CHECK(is_binary(m));
    m[4] = 1.0;
    CHECK_FALSE(mask_is_empty(m));
    m[0] = 0.5;
    CHECK_FALSE(is_binary(m));
    CHECK_THROWS_AS(require_binary_mask(m, "t"), ContractError);
}

TEST_CASE("bilinear resize reproduces a linear ramp and constants") {
    Tensor c({3, 5, 7}, 0.25);
    CHECK(max_abs_diff(resize_bilinear(c, 11, 3), Tensor({3, 11, 3}, 0.25)) < 1e-15);
    // Ramp sampled at pixel centers upsampled 2x: interior outputs stay on the ramp.
    Tensor ramp({1, 1, 4});
    for (std::size_t x = 0; x < 4; ++x) ramp.at(0, 0, x) = 0.1 * x;
    const Tensor up = resize_bilinear(ramp, 1, 8);
    for (std::size_t x = 1; x + 1 < 8; ++x) {
        const double src = (x + 0.5) / 2.0 - 0.5;
        CHECK(up.at(0, 0, x) == doctest::Approx(0.1 * src).epsilon(1e-12));
    }
    CHECK(up.at(0, 0, 0) == 0.0);
    CHECK(up.at(0, 0, 7) == doctest::Approx(0.3));
    Rng rng(1);
    const Tensor img = Tensor::randn({3, 6, 6}, rng);
    CHECK(resize_bilinear(img, 6, 6) == img);
    // 2x downsample with half-pixel centers averages each 2x2 block.
    const Tensor down = resize_bilinear(img, 3, 3);
    const double want = 0.25 * (img.at(1, 2, 4) + img.at(1, 2, 5) + img.at(1, 3, 4) + img.at(1, 3, 5));
    CHECK(down.at(1, 1, 2) == doctest::Approx(want).epsilon(1e-12));
}

TEST_CASE("downsample_mask_any marks a block if any pixel is masked") {
    Tensor m({1, 4, 4});
    m.at(0, 3, 1) = 1.0;
    const Tensor d = downsample_mask_any(m, 2);
    CHECK(d.shape() == Shape{1, 2, 2});
    CHECK(d.at(0, 1, 0) == 1.0);
    CHECK(d.at(0, 0, 0) + d.at(0, 0, 1) + d.at(0, 1, 1) == 0.0);
    CHECK_THROWS_AS(downsample_mask_any(Tensor({1, 5, 4}), 2), GeometryError);
}

TEST_CASE("crop and paste are inverse on the covered region") {
    Rng rng(2);
    const Tensor img = Tensor::randn({3, 8, 9}, rng);
    const Tensor part = crop(img, 2, 3, 4, 5);
    CHECK(part.shape() == Shape{3, 4, 5});
    CHECK(part.at(1, 0, 0) == img.at(1, 2, 3));
    Tensor canvas({3, 8, 9});
    paste(canvas, part, 2, 3);
    CHECK(canvas.at(2, 5, 7) == img.at(2, 5, 7));
    CHECK(canvas.at(2, 1, 7) == 0.0);
    CHECK_THROWS_AS(crop(img, 6, 0, 4, 1), GeometryError);
    CHECK_THROWS_AS(paste(canvas, part, 5, 0), GeometryError);
}

TEST_CASE("gaussian blur preserves constants and mean-ish mass") {
    CHECK(max_abs_diff(gaussian_blur(Tensor({1, 9, 9}, 0.4), 1.5), Tensor({1, 9, 9}, 0.4)) < 1e-14);
    Rng rng(6);
    const Tensor img = Tensor::randn({3, 10, 10}, rng);
    CHECK(gaussian_blur(img, 0.0) == img);
    // Blur never increases total variation along rows.
    const Tensor b = gaussian_blur(img, 1.0);
    double tv_img = 0, tv_b = 0;
    for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t y = 0; y < 10; ++y)
            for (std::size_t x = 1; x < 10; ++x) {
                tv_img += std::abs(img.at(c, y, x) - img.at(c, y, x - 1));
                tv_b += std::abs(b.at(c, y, x) - b.at(c, y, x - 1));
            }
    CHECK(tv_b < tv_img);
}
