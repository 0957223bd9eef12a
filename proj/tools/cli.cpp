#include "cli.hpp"

#include <algorithm>
#include <charconv>
#include <cstdlib>
#include <fstream>
#include <ostream>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "padapter/backbone.hpp"
#include "padapter/control.hpp"
#include "padapter/data_synth.hpp"
#include "padapter/dca.hpp"
#include "padapter/errors.hpp"
#include "padapter/eval.hpp"
#include "padapter/hash.hpp"
#include "padapter/image.hpp"
#include "padapter/params.hpp"
#include "padapter/pipeline.hpp"
#include "padapter/rpa.hpp"
#include "padapter/training.hpp"

namespace padapter::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

class UsageError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

std::string escape(const std::string& s) {
    std::string out;
    for (char c : s) {
        if (c == '"' || c == '\\') out += '\\';
        out += c == '\n' ? ' ' : c;
    }
    return out;
}

int fail(std::ostream& err, const char* kind, const std::string& msg, int code) {
    err << "error: kind=" << kind << " msg=\"" << escape(msg) << "\"\n";
    return code;
}

std::size_t resolve_jobs(int flag) {
    if (flag > 0) return static_cast<std::size_t>(flag);
    if (const char* env = std::getenv("PADAPTER_JOBS")) {
        int v = 0;
        const std::string s(env);
        auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
        if (ec != std::errc() || p != s.data() + s.size() || v < 1)
            throw UsageError("PADAPTER_JOBS must be a positive integer, got '" + s + "'");
        return static_cast<std::size_t>(v);
    }
    return 1;
}

void write_json(const fs::path& path, const json& j) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open " + path.string() + " for writing");
    f << j.dump(2) << "\n";
    if (!f) throw IoError("write failed: " + path.string());
}

json read_json_file(const fs::path& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot open " + path.string());
    try {
        return json::parse(f);
    } catch (const json::exception& e) {
        throw FormatError(path.string() + ": " + e.what());
    }
}

json hash_tree(const fs::path& p) {
    json out = json::object();
    if (fs::is_directory(p)) {
        std::vector<fs::path> files;
        for (const auto& e : fs::recursive_directory_iterator(p))
            if (e.is_regular_file() && e.path().filename() != "run.json") files.push_back(e.path());
        std::sort(files.begin(), files.end());
        for (const auto& f : files) out[fs::relative(f, p).generic_string()] = sha256_file(f);
    } else {
        out[p.filename().string()] = sha256_file(p);
    }
    return out;
}

// Run manifest: resolved configuration plus input and output hashes. Worker
// counts are deliberately left out so outputs do not depend on them.
void write_manifest(const fs::path& target, const std::string& command, const json& config,
                    const std::vector<fs::path>& inputs, const std::vector<fs::path>& outputs) {
    json m;
    m["command"] = command;
    m["config"] = config;
    m["inputs"] = json::object();
    for (const auto& p : inputs) m["inputs"][p.generic_string()] = hash_tree(p);
    m["outputs"] = json::object();
    for (const auto& p : outputs) m["outputs"][p.generic_string()] = hash_tree(p);
    const fs::path path = fs::is_directory(target) ? target / "run.json" : fs::path(target.string() + ".run.json");
    write_json(path, m);
}

void require_file(const fs::path& p, const char* what) {
    if (!fs::exists(p)) throw UsageError(std::string(what) + " '" + p.string() + "' does not exist");
}

ParameterStore load_frozen(const fs::path& p) {
    ParameterStore s = load_checkpoint(p);
    s.freeze_all();
    return s;
}

json hyper_json(const TrainHyper& h) {
    return {{"steps", h.steps}, {"batch", h.batch}, {"lr", h.lr}, {"weight_decay", h.weight_decay},
            {"cond_dropout", h.cond_dropout}};
}

json loss_json(const std::vector<double>& losses) {
    json out = json::array();
    for (double v : window_means(losses, 20)) out.push_back(v);
    return out;
}

void add_hyper_options(CLI::App* sub, TrainHyper& h) {
    sub->add_option("--steps", h.steps, "training steps")->check(CLI::NonNegativeNumber);
    sub->add_option("--batch", h.batch, "minibatch size")->check(CLI::PositiveNumber);
    sub->add_option("--lr", h.lr, "AdamW learning rate")->check(CLI::PositiveNumber);
    sub->add_option("--weight-decay", h.weight_decay, "AdamW decoupled weight decay")->check(CLI::NonNegativeNumber);
    sub->add_option("--cond-dropout", h.cond_dropout, "probability of dropping the prompt")
        ->check(CLI::Range(0.0, 1.0));
}

std::vector<TrainingExample> load_examples(const fs::path& dir) {
    require_file(dir / "manifest.json", "dataset manifest");
    auto items = load_dataset(dir);
    if (items.empty()) throw UsageError("dataset '" + dir.string() + "' is empty");
    return training_examples(items);
}

std::pair<std::size_t, Tokens> parse_patch_prompt(const std::string& s) {
    const auto colon = s.find(':');
    if (colon == std::string::npos || colon == 0) throw UsageError("--patch-prompt expects i:\"tokens\", got '" + s + "'");
    std::size_t idx = 0;
    const auto* b = s.data();
    auto [p, ec] = std::from_chars(b, b + colon, idx);
    if (ec != std::errc() || p != b + colon) throw UsageError("--patch-prompt index must be an integer: '" + s + "'");
    std::string text = s.substr(colon + 1);
    if (text.size() >= 2 && text.front() == '"' && text.back() == '"') text = text.substr(1, text.size() - 2);
    return {idx, vocab::parse(text)};
}

// Loads base + dca (+ optional rpa/ctrl) into the stores the pipeline uses.
struct LoadedModels {
    ParameterStore stage1;
    std::optional<ParameterStore> stage2;
};

LoadedModels load_models(const fs::path& base, const fs::path& dca, const std::string& rpa) {
    require_file(base, "base checkpoint");
    require_file(dca, "dca checkpoint");
    LoadedModels m;
    m.stage1 = load_frozen(base);
    const ParameterStore d = load_frozen(dca);
    if (!d.has_prefix("dca.")) throw UsageError("checkpoint '" + dca.string() + "' has no dca.* tensors");
    m.stage1.merge(d);
    if (!rpa.empty()) {
        require_file(rpa, "rpa checkpoint");
        ParameterStore s2 = m.stage1;
        s2.merge(load_frozen(rpa));
        m.stage2 = std::move(s2);
    }
    return m;
}

int cmd_gen_data(const fs::path& out, std::size_t count, std::size_t size, double mix, std::uint64_t seed,
                 std::size_t jobs, std::ostream& os) {
    if (size == 0) throw UsageError("--size must be positive");
    const json manifest = build_dataset(count, size, mix, seed, out, jobs);
    write_manifest(out, "gen-data", {{"count", count}, {"size", size}, {"mix", mix}, {"seed", seed}}, {}, {out});
    os << "wrote " << manifest["items"].size() << " items to " << out.string() << "\n";
    return 0;
}

int cmd_pretrain(const fs::path& data, const fs::path& out, DenoiserConfig cfg, const TrainHyper& hyper,
                 std::uint64_t seed, std::ostream& os) {
    const auto examples = load_examples(data);
    cfg.channels = channels(examples[0].image);
    cfg.height = height(examples[0].image);
    cfg.width = width(examples[0].image);
    std::vector<double> losses;
    const ParameterStore base = pretrain_base(examples, cfg, hyper, seed, &losses);
    save_checkpoint(base, out);
    json c = hyper_json(hyper);
    c["seed"] = seed;
    c["model"] = {{"height", cfg.height}, {"width", cfg.width}, {"channels", cfg.channels}, {"token", cfg.token},
                  {"dim", cfg.dim}, {"layers", cfg.layers}, {"heads", cfg.heads}, {"timesteps", cfg.timesteps}};
    c["loss_window_means"] = loss_json(losses);
    write_manifest(out, "pretrain", c, {data}, {out});
    os << "pretrained " << base.scalar_count() << " parameters -> " << out.string() << "\n";
    return 0;
}

int cmd_train_dca(const fs::path& base_path, const fs::path& data, const fs::path& out, const TrainHyper& hyper,
                  std::uint64_t seed, std::ostream& os) {
    require_file(base_path, "base checkpoint");
    const ParameterStore base = load_frozen(base_path);
    const auto examples = load_examples(data);
    const std::string before = partition_hash(base, "base.");
    const Stage1Result r = train_stage1(base, examples, hyper, seed);
    if (partition_hash(base, "base.") != before) throw std::logic_error("base weights changed during DCA training");
    save_checkpoint(r.dca, out);
    json c = hyper_json(hyper);
    c["seed"] = seed;
    c["base_hash"] = before;
    c["loss_window_means"] = loss_json(r.loss_history);
    write_manifest(out, "train-dca", c, {base_path, data}, {out});
    os << "trained " << r.dca.scalar_count() << " DCA parameters -> " << out.string() << "\n";
    return 0;
}

int cmd_train_rpa(const fs::path& base_path, const fs::path& dca_path, const fs::path& data, const fs::path& out,
                  const TrainHyper& hyper, std::uint64_t seed, bool use_rpa, std::ostream& os) {
    const LoadedModels m = load_models(base_path, dca_path, "");
    require_file(data / "manifest.json", "dataset manifest");
    const auto items = load_dataset(data);
    if (items.empty()) throw UsageError("dataset '" + data.string() + "' is empty");
    const auto pairs = make_patch_pairs(items, seed);
    const std::string base_before = partition_hash(m.stage1, "base.");
    const std::string dca_before = partition_hash(m.stage1, "dca.");
    const Stage2Result r = train_stage2(m.stage1, pairs, hyper, seed, use_rpa);
    save_checkpoint(r.params, out);
    json c = hyper_json(hyper);
    c["seed"] = seed;
    c["use_rpa"] = use_rpa;
    c["base_hash"] = base_before;
    c["dca_hash"] = dca_before;
    c["loss_window_means"] = loss_json(r.loss_history);
    write_manifest(out, "train-rpa", c, {base_path, dca_path, data}, {out});
    os << "trained " << r.params.scalar_count() << " stage-2 parameters -> " << out.string() << "\n";
    return 0;
}

struct InpaintArgs {
    fs::path image, mask, base, dca, out;
    std::string rpa, prompt;
    std::vector<std::string> patch_prompts;
    std::size_t patch = 0;
    int steps = 30;
    double cfg = 7.0;
    std::uint64_t seed = 0;
    bool no_rpa_attention = false;
};

int cmd_inpaint(const InpaintArgs& a, std::size_t jobs, std::ostream& os) {
    require_file(a.image, "image");
    require_file(a.mask, "mask");
    const LoadedModels m = load_models(a.base, a.dca, a.rpa);
    InpaintTask task;
    task.image = read_netpbm(a.image);
    task.mask = read_mask(a.mask);
    if (height(task.mask) != height(task.image) || width(task.mask) != width(task.image))
        throw UsageError("mask " + shape_str(task.mask.shape()) + " does not match image " +
                         shape_str(task.image.shape()));
    task.prompt = vocab::parse(a.prompt);
    for (const auto& pp : a.patch_prompts) {
        auto [i, toks] = parse_patch_prompt(pp);
        task.patch_prompts[i] = std::move(toks);
    }
    task.seed = a.seed;
    const DenoiserConfig cfg = config_from_store(m.stage1);
    PipelineConfig pc;
    pc.sampler.steps = a.steps;
    pc.sampler.cfg_scale = a.cfg;
    pc.patch_h = pc.patch_w = a.patch ? a.patch : cfg.height;
    pc.jobs = jobs;
    pc.use_rpa = !a.no_rpa_attention;
    const PipelineResult r = run_full_pipeline(task, {&m.stage1, m.stage2 ? &*m.stage2 : nullptr}, pc);
    write_netpbm(a.out, r.image);

    json c;
    c["steps"] = a.steps;
    c["cfg"] = a.cfg;
    c["seed"] = a.seed;
    c["patch"] = pc.patch_h;
    c["prompt"] = vocab::render(task.prompt);
    c["patch_prompts"] = json::object();
    for (const auto& [i, t] : task.patch_prompts) c["patch_prompts"][std::to_string(i)] = vocab::render(t);
    c["stage2"] = m.stage2.has_value();
    c["use_rpa"] = pc.use_rpa;
    c["stage1_factor"] = r.stage1.factor;
    c["references"] = json::array();
    for (const auto& ref : r.references) c["references"].push_back(ref ? json(*ref) : json(nullptr));
    std::vector<fs::path> inputs{a.image, a.mask, a.base, a.dca};
    if (!a.rpa.empty()) inputs.emplace_back(a.rpa);
    write_manifest(a.out, "inpaint", c, inputs, {a.out});
    os << "wrote " << a.out.string() << "\n";
    return 0;
}

// Evaluation config:
// {"data": DIR, "limit": N, "seeds": [...], "steps": 30, "cfg": 7.0, "patch": PX,
//  "arms": [{"name": ..., "base": ..., "dca": ..., "rpa": ..., "use_rpa": bool}, ...]}
int cmd_eval(const fs::path& config_path, const fs::path& out, std::size_t jobs, std::ostream& os) {
    require_file(config_path, "eval config");
    const json conf = read_json_file(config_path);
    const fs::path base_dir = config_path.parent_path();
    auto resolve = [&](const std::string& p) { return fs::path(p).is_absolute() ? fs::path(p) : base_dir / p; };
    std::vector<fs::path> inputs{config_path};
    try {
        const fs::path data = resolve(conf.at("data").get<std::string>());
        require_file(data / "manifest.json", "dataset manifest");
        auto items = load_dataset(data);
        inputs.push_back(data);
        const std::size_t limit = conf.value("limit", items.size());
        if (items.size() > limit) items.resize(limit);
        if (items.empty()) throw UsageError("eval: dataset is empty");
        const auto seeds = conf.at("seeds").get<std::vector<std::uint64_t>>();
        if (seeds.empty()) throw UsageError("eval: seeds must be nonempty");
        const auto& arms_conf = conf.at("arms");
        if (!arms_conf.is_array() || arms_conf.empty() || arms_conf.size() > 2)
            throw UsageError("eval: 'arms' must list one or two arms");

        PipelineConfig pc;
        pc.sampler.steps = conf.value("steps", 30);
        pc.sampler.cfg_scale = conf.value("cfg", 7.0);
        const std::size_t patch = conf.value("patch", std::size_t{0});

        std::vector<EvalTask> tasks;
        for (const auto& it : items) {
            EvalTask t;
            t.truth = it.image;
            t.mask = it.mask;
            t.prompt = it.prompt();
            const std::size_t p = patch ? patch : height(it.image);
            t.grid.emplace(height(it.image), width(it.image), p, p);
            tasks.push_back(std::move(t));
        }
        std::vector<LoadedModels> models;
        std::vector<ArmSpec> arms;
        models.reserve(arms_conf.size());
        for (const auto& a : arms_conf) {
            const fs::path bp = resolve(a.at("base").get<std::string>());
            const fs::path dp = a.contains("dca") ? resolve(a.at("dca").get<std::string>()) : fs::path();
            const std::string rp = a.contains("rpa") ? resolve(a.at("rpa").get<std::string>()).string() : "";
            if (dp.empty()) {
                require_file(bp, "base checkpoint");
                models.push_back({load_frozen(bp), std::nullopt});
            } else {
                models.push_back(load_models(bp, dp, rp));
                inputs.push_back(dp);
            }
            inputs.push_back(bp);
            if (!rp.empty()) inputs.emplace_back(rp);
            ArmSpec arm;
            arm.name = a.at("name").get<std::string>();
            arm.seeds = seeds;
            arm.config = a;
            const LoadedModels* lm = &models.back();
            PipelineConfig apc = pc;
            apc.use_rpa = a.value("use_rpa", true);
            arm.run = [lm, apc](const EvalTask& t, std::size_t, std::uint64_t seed) {
                InpaintTask task{t.truth, t.mask, t.prompt, {}, seed};
                PipelineConfig c = apc;
                c.patch_h = c.patch_w = t.grid->patch_h();
                return run_full_pipeline(task, {&lm->stage1, lm->stage2 ? &*lm->stage2 : nullptr}, c).image;
            };
            arms.push_back(std::move(arm));
        }

        json report;
        report["config"] = conf;
        report["seeds"] = seeds;
        if (arms.size() == 1) {
            const MetricReport r = evaluate_arm(arms[0], tasks, jobs);
            const json j = r.to_json();
            report["per_image"] = j["per_image"];
            report["aggregates"] = {{arms[0].name, j["aggregates"]}};
        } else {
            const AblationResult r = run_ablation(arms[0], arms[1], tasks, jobs);
            const json ja = r.a.to_json(), jb = r.b.to_json();
            report["per_image"] = {{arms[0].name, ja["per_image"]}, {arms[1].name, jb["per_image"]}};
            report["aggregates"] = {{arms[0].name, ja["aggregates"]}, {arms[1].name, jb["aggregates"]}};
            report["deltas"] = r.deltas;
        }
        write_json(out, report);
    } catch (const json::exception& e) {
        throw UsageError(std::string("eval config: ") + e.what());
    }
    write_manifest(out, "eval", conf, inputs, {out});
    os << "wrote " << out.string() << "\n";
    return 0;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Two-stage patch-adapter inpainting: data generation, training, inference, evaluation"};
    app.name("padapter");
    app.require_subcommand(1);
    int jobs_flag = 0;
    app.add_option("--jobs", jobs_flag, "worker threads (default: PADAPTER_JOBS or 1)")->check(CLI::PositiveNumber);

    fs::path out_path, data, base, dca;
    std::uint64_t seed = 0;

    auto* gen = app.add_subcommand("gen-data", "generate a synthetic texture dataset");
    std::size_t count = 0, size = 64;
    double mix = 0.6;
    gen->add_option("--out", out_path, "output directory")->required();
    gen->add_option("--count", count, "number of scenes")->required();
    gen->add_option("--size", size, "image edge in pixels");
    gen->add_option("--mix", mix, "fraction of random-kind masks")->check(CLI::Range(0.0, 1.0));
    gen->add_option("--seed", seed, "dataset seed");

    auto* pre = app.add_subcommand("pretrain", "pretrain the base denoiser");
    DenoiserConfig model;
    TrainHyper pre_hyper;
    pre_hyper.lr = kPretrainLr;
    TrainHyper hyper;
    pre->add_option("--data", data, "dataset directory")->required();
    pre->add_option("--out", out_path, "output checkpoint")->required();
    pre->add_option("--seed", seed, "training seed");
    pre->add_option("--dim", model.dim, "model width");
    pre->add_option("--layers", model.layers, "transformer blocks");
    pre->add_option("--heads", model.heads, "attention heads");
    pre->add_option("--token", model.token, "token cell edge in pixels");
    add_hyper_options(pre, pre_hyper);

    auto* tdca = app.add_subcommand("train-dca", "stage 1: train the dual context adapter");
    tdca->add_option("--base", base, "base checkpoint")->required();
    tdca->add_option("--data", data, "dataset directory")->required();
    tdca->add_option("--out", out_path, "output checkpoint")->required();
    tdca->add_option("--seed", seed, "training seed");
    add_hyper_options(tdca, hyper);

    auto* trpa = app.add_subcommand("train-rpa", "stage 2: train the reference patch adapter and control branch");
    bool control_only = false;
    trpa->add_option("--base", base, "base checkpoint")->required();
    trpa->add_option("--dca", dca, "dca checkpoint")->required();
    trpa->add_option("--data", data, "dataset directory (images twice the base size)")->required();
    trpa->add_option("--out", out_path, "output checkpoint")->required();
    trpa->add_option("--seed", seed, "training seed");
    trpa->add_flag("--control-only", control_only, "train only the control branch (no-RPA ablation arm)");
    add_hyper_options(trpa, hyper);

    auto* inp = app.add_subcommand("inpaint", "run the two-stage pipeline on one image");
    InpaintArgs ia;
    inp->add_option("--image", ia.image, "input PPM/PGM")->required();
    inp->add_option("--mask", ia.mask, "mask PGM (255 = hole)")->required();
    inp->add_option("--prompt", ia.prompt, "global prompt tokens");
    inp->add_option("--patch-prompt", ia.patch_prompts, "per-patch prompt i:\"tokens\"");
    inp->add_option("--base", ia.base, "base checkpoint")->required();
    inp->add_option("--dca", ia.dca, "dca checkpoint")->required();
    inp->add_option("--rpa", ia.rpa, "stage-2 checkpoint (rpa/ctrl); omit for stage 1 only");
    inp->add_option("--patch", ia.patch, "patch edge in pixels (default: base resolution)");
    inp->add_option("--steps", ia.steps, "sampler steps")->check(CLI::PositiveNumber);
    inp->add_option("--cfg", ia.cfg, "classifier-free guidance scale");
    inp->add_option("--seed", ia.seed, "sampling seed");
    inp->add_flag("--no-reference", ia.no_rpa_attention, "stage 2 without reference attention");
    inp->add_option("--out", ia.out, "output image")->required();

    auto* ev = app.add_subcommand("eval", "evaluate one or two model arms on a dataset");
    fs::path config_path;
    ev->add_option("--config", config_path, "ablation config JSON")->required();
    ev->add_option("--out", out_path, "report JSON")->required();

    try {
        std::vector<std::string> rev(args.rbegin(), args.rend());
        app.parse(rev);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e, out, err);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e, out, err);
    } catch (const CLI::ParseError& e) {
        std::string what = e.what();
        return fail(err, "usage", what, 2);
    }

    try {
        const std::size_t jobs = resolve_jobs(jobs_flag);
        if (*gen) return cmd_gen_data(out_path, count, size, mix, seed, jobs, out);
        if (*pre) return cmd_pretrain(data, out_path, model, pre_hyper, seed, out);
        if (*tdca) return cmd_train_dca(base, data, out_path, hyper, seed, out);
        if (*trpa) return cmd_train_rpa(base, dca, data, out_path, hyper, seed, !control_only, out);
        if (*inp) return cmd_inpaint(ia, jobs, out);
        if (*ev) return cmd_eval(config_path, out_path, jobs, out);
        return fail(err, "usage", "no subcommand", 2);
    } catch (const UsageError& e) {
        return fail(err, "usage", e.what(), 2);
    } catch (const ContractError& e) {
        return fail(err, "contract", e.what(), 2);
    } catch (const ShapeError& e) {
        return fail(err, "shape", e.what(), 2);
    } catch (const GeometryError& e) {
        return fail(err, "geometry", e.what(), 2);
    } catch (const RangeError& e) {
        return fail(err, "range", e.what(), 2);
    } catch (const FormatError& e) {
        return fail(err, "format", e.what(), 1);
    } catch (const IoError& e) {
        return fail(err, "io", e.what(), 1);
    } catch (const std::exception& e) {
        return fail(err, "runtime", e.what(), 1);
    }
}

}  // namespace padapter::cli
