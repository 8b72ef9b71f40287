#include "fdn/cli.hpp"

#include "fdn/checkpoint.hpp"
#include "fdn/config.hpp"
#include "fdn/evaluation.hpp"
#include "fdn/log.hpp"
#include "fdn/training.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

namespace fdn::cli {

namespace fs = std::filesystem;

namespace {

struct Options {
    std::string config;
    uint64_t seed = 0;
    std::string out;
    int episodes = 12;
    std::string delays;
    std::string flags;
    std::string stage;
    double data_util = 100.0;
    std::string model;
    std::string baseline;
    std::string data;
};

/// Error raised with the pipeline stage it occurred in.
struct StageError : std::runtime_error {
    StageError(const std::string& stage, const std::string& what)
        : std::runtime_error(stage + ": " + what), usage(stage == "arguments")
    {
    }
    bool usage;
};

template <typename F>
auto stage(const std::string& name, F&& f)
{
    try {
        return f();
    } catch (const StageError&) {
        throw;
    } catch (const std::exception& err) {
        throw StageError(name, err.what());
    }
}

std::string utc_timestamp()
{
    const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&now, &tm);
    std::ostringstream os;
    os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
    return os.str();
}

class RunManifest {
public:
    RunManifest(std::string command, const Options& opt) : command_(std::move(command)), opt_(opt) {}

    void input(const fs::path& p) { inputs_.push_back(p); }
    void output(const fs::path& p) { outputs_.push_back(p); }

    void write(const fs::path& dir) const
    {
        std::ofstream os(dir / "run_manifest.txt");
        if (!os)
            throw std::runtime_error("cannot write run manifest in " + dir.string());
        os << "command = " << command_ << '\n'
           << "config = " << (opt_.config.empty() ? "(defaults)" : opt_.config) << '\n'
           << "seed = " << opt_.seed << '\n'
           << "timestamp = " << utc_timestamp() << '\n';
        for (const auto& p : inputs_) {
            os << "input = " << p.string() << '\n';
            for (const auto& [name, hash] : hashes(p))
                os << "input_sha256 " << name << " = " << hash << '\n';
        }
        for (const auto& p : outputs_)
            os << "output = " << p.string() << '\n';
    }

private:
    static std::vector<std::pair<std::string, std::string>> hashes(const fs::path& p)
    {
        std::vector<std::pair<std::string, std::string>> out;
        if (fs::is_regular_file(p)) {
            out.emplace_back(p.filename().string(), checkpoint::sha256_file(p));
        } else if (fs::is_directory(p)) {
            std::vector<fs::path> files;
            for (const auto& entry : fs::directory_iterator(p))
                if (entry.is_regular_file() && entry.path().filename() != "run_manifest.txt")
                    files.push_back(entry.path());
            std::sort(files.begin(), files.end());
            for (const auto& f : files)
                out.emplace_back(f.filename().string(), checkpoint::sha256_file(f));
        }
        return out;
    }

    std::string command_;
    const Options& opt_;
    std::vector<fs::path> inputs_;
    std::vector<fs::path> outputs_;
};

config::RunConfig load_config(const Options& opt)
{
    return stage("config", [&] { return opt.config.empty() ? config::RunConfig{} : config::load(opt.config); });
}

fs::path prepare_out(const Options& opt)
{
    if (opt.out.empty())
        throw StageError("arguments", "--out is required");
    fs::create_directories(opt.out);
    return opt.out;
}

void save_effective_config(const fs::path& dir, const config::RunConfig& cfg)
{
    std::ofstream os(dir / "config.ini");
    config::write(os, cfg);
}

std::vector<dataset::Episode> load_episodes(const Options& opt, const config::RunConfig& cfg)
{
    if (opt.data.empty())
        throw StageError("arguments", "--data is required");
    return stage("loading episodes", [&] {
        auto raw = dataset::load_directory(opt.data);
        if (raw.empty())
            throw std::runtime_error("no episodes in " + opt.data);
        std::vector<dataset::Episode> out;
        for (auto& e : raw)
            out.push_back(e.preprocessed() ? e : dataset::preprocess_episode(e, cfg.model.filter, cfg.savgol));
        for (const auto& e : out)
            if (e.dof() != out.front().dof())
                throw std::runtime_error("episodes mix joint counts (" + std::to_string(e.dof()) + " vs " +
                                         std::to_string(out.front().dof()) + ")");
        return out;
    });
}

std::vector<double> delays_of(const Options& opt, const config::RunConfig& cfg)
{
    return opt.delays.empty() ? cfg.delays_ms : stage("arguments", [&] { return config::parse_numbers(opt.delays); });
}

dataset::WindowSet windows_of(std::span<const dataset::Episode> episodes, std::span<const size_t> ids,
                              const config::RunConfig& cfg, int stride)
{
    dataset::WindowSet ws(cfg.model.history, cfg.model.horizon, cfg.model.filter);
    for (auto i : ids)
        ws.add_episode(episodes[i], stride);
    if (ws.size() == 0)
        throw std::runtime_error("no training windows (episodes shorter than L + T?)");
    return ws;
}

std::vector<std::string> names_of(std::span<const dataset::Episode> episodes, std::span<const size_t> ids)
{
    std::vector<std::string> out;
    for (auto i : ids)
        out.push_back(episodes[i].name);
    return out;
}

void report_training(const training::TrainResult& r)
{
    if (r.history.empty()) {
        std::cout << "no optimizer steps taken\n";
        return;
    }
    std::cout << "steps " << r.steps << ", loss " << r.history.front().total << " -> " << r.history.back().total
              << " (trend " << r.history.back().trend << ", residual " << r.history.back().residual << ")\n";
}

int cmd_synth(const Options& opt)
{
    auto cfg = load_config(opt);
    const auto out = prepare_out(opt);
    if (opt.episodes < 1)
        throw StageError("arguments", "--episodes must be >= 1");
    RunManifest manifest("synth", opt);
    stage("synthesis", [&] {
        for (int i = 0; i < opt.episodes; ++i) {
            auto e = dataset::synth_episode(cfg.synth, opt.seed * 1000ULL + static_cast<uint64_t>(i));
            std::ostringstream name;
            name << "episode_" << std::setw(3) << std::setfill('0') << i;
            e.name = name.str();
            e.session = "synthetic";
            const auto path = out / (e.name + ".csv");
            dataset::save_episode(e, path, cfg.synth);
            manifest.output(path);
        }
        return 0;
    });
    save_effective_config(out, cfg);
    manifest.write(out);
    std::cout << "wrote " << opt.episodes << " episodes to " << out.string() << '\n';
    return kExitOk;
}

int cmd_preprocess(const Options& opt)
{
    auto cfg = load_config(opt);
    const auto out = prepare_out(opt);
    auto episodes = load_episodes(opt, cfg);
    RunManifest manifest("preprocess", opt);
    manifest.input(opt.data);
    stage("writing episodes", [&] {
        for (const auto& e : episodes) {
            const auto path = out / (e.name + ".csv");
            dataset::save_episode(e, path);
            manifest.output(path);
        }
        return 0;
    });
    save_effective_config(out, cfg);
    manifest.write(out);
    std::cout << "preprocessed " << episodes.size() << " episodes into " << out.string() << '\n';
    return kExitOk;
}

checkpoint::Manifest base_manifest(const config::RunConfig& cfg, const Options& opt, const dataset::NormStats& stats)
{
    checkpoint::Manifest m;
    m.model = cfg.model;
    m.stats = stats;
    m.seed = opt.seed;
    return m;
}

struct Prepared {
    std::vector<dataset::Episode> episodes;
    dataset::Split split;
};

Prepared prepare_split(const Options& opt, const config::RunConfig& cfg, int pad_to = 0)
{
    Prepared p;
    p.episodes = load_episodes(opt, cfg);
    if (pad_to > 0)
        for (auto& e : p.episodes)
            e = stage("layout", [&] { return dataset::pad_dof(e, pad_to); });
    p.split = stage("split", [&] {
        return dataset::split_episodes(p.episodes, dataset::SplitPolicy{cfg.test_fraction, opt.seed});
    });
    return p;
}

training::TrainConfig train_config(const config::RunConfig& cfg, const Options& opt, const fs::path& out)
{
    auto t = cfg.train;
    t.seed = opt.seed;
    t.metrics_log = out / "metrics.csv";
    return t;
}

/// Trains one FDN or baseline and saves it to `out`. Returns the exit code.
int train_into(const fs::path& out, config::RunConfig cfg, const Options& opt, const Prepared& data,
               const std::string& command)
{
    RunManifest manifest(command, opt);
    manifest.input(opt.data);
    auto ws = stage("windows", [&] { return windows_of(data.episodes, data.split.train, cfg, cfg.window_stride); });
    auto stats = stage("normalization", [&] { return dataset::fit_norm(ws); });
    auto m = base_manifest(cfg, opt, stats);
    m.test_episodes = names_of(data.episodes, data.split.test);
    const auto tcfg = train_config(cfg, opt, out);

    training::TrainResult result;
    if (!opt.baseline.empty()) {
        auto bcfg = baselines::BaselineConfig::matching(baselines::parse_baseline(opt.baseline), cfg.model);
        bcfg.mlp_width = cfg.mlp_width;
        bcfg.mlp_depth = cfg.mlp_depth;
        auto net = stage("model", [&] { return training::make_baseline(bcfg, opt.seed); });
        result = stage("training", [&] { return training::train(net, ws, stats, tcfg); });
        m.kind = baselines::to_string(bcfg.kind);
        m.baseline = bcfg;
        m.steps = result.steps;
        stage("checkpoint", [&] { return checkpoint::save(out, *net, m); });
    } else {
        auto net = stage("model", [&] { return training::make_fdn(cfg.model, opt.seed); });
        result = stage("training", [&] { return training::train(net, ws, stats, tcfg); });
        m.steps = result.steps;
        stage("checkpoint", [&] { return checkpoint::save(out, *net, m); });
    }
    save_effective_config(out, cfg);
    manifest.output(out / checkpoint::kBlobName);
    manifest.output(out / checkpoint::kManifestName);
    manifest.output(tcfg.metrics_log);
    manifest.write(out);
    report_training(result);
    if (result.aborted) {
        std::cerr << "fdn " << command << ": training: " << result.abort_reason
                  << " (last good parameters saved)\n";
        return kExitRuntime;
    }
    return kExitOk;
}

int cmd_train(const Options& opt)
{
    auto cfg = load_config(opt);
    const auto out = prepare_out(opt);
    if (!opt.flags.empty())
        cfg.model.ablation = stage("arguments", [&] { return model::AblationFlags::parse(opt.flags); });
    auto data = prepare_split(opt, cfg);
    cfg.model.dof = data.episodes.front().dof();
    return train_into(out, cfg, opt, data, "train");
}

int cmd_pretrain(const Options& opt)
{
    auto cfg = load_config(opt);
    const auto out = prepare_out(opt);
    if (!(opt.data_util > 0.0 && opt.data_util <= 100.0))
        throw StageError("arguments", "--data-util must be a percentage in (0, 100]");
    RunManifest manifest("pretrain", opt);
    std::vector<dataset::Episode> corpus;
    if (!opt.data.empty()) {
        manifest.input(opt.data);
        for (auto& e : load_episodes(opt, cfg))
            corpus.push_back(stage("layout", [&] { return dataset::pad_dof(e, 7); }));
    } else {
        auto ccfg = cfg.corpus;
        ccfg.seed = opt.seed;
        corpus = stage("surrogate corpus", [&] { return training::surrogate_corpus(ccfg); });
    }
    training::PretrainConfig pcfg;
    pcfg.model = cfg.model;
    pcfg.window_stride = cfg.pretrain_stride;
    pcfg.train = train_config(cfg, opt, out);
    pcfg.train.max_steps = cfg.pretrain_iterations;
    pcfg.train.data_fraction = opt.data_util / 100.0;
    auto trained = stage("pretraining", [&] { return training::pretrain(corpus, pcfg); });

    checkpoint::Manifest m;
    m.model = trained.model->config();
    m.stage = checkpoint::Stage::Pretrain;
    m.stats = trained.stats;
    m.seed = opt.seed;
    m.steps = trained.result.steps;
    stage("checkpoint", [&] { return checkpoint::save(out, *trained.model, m); });
    save_effective_config(out, cfg);
    manifest.output(out / checkpoint::kBlobName);
    manifest.output(out / checkpoint::kManifestName);
    manifest.write(out);
    report_training(trained.result);
    return trained.result.aborted ? kExitRuntime : kExitOk;
}

int cmd_transfer(const Options& opt)
{
    auto cfg = load_config(opt);
    const auto out = prepare_out(opt);
    if (opt.model.empty())
        throw StageError("arguments", "--model (pretrained checkpoint) is required");
    const auto target = opt.stage.empty() ? checkpoint::Stage::FineTune
                                          : stage("arguments", [&] { return checkpoint::parse_stage(opt.stage); });
    if (target != checkpoint::Stage::LinearProbe && target != checkpoint::Stage::FineTune)
        throw StageError("arguments", "--stage must be linear_probe or fine_tune for transfer");
    const auto pre = stage("checkpoint", [&] { return checkpoint::read_manifest(opt.model); });
    cfg.model = pre.model;
    auto data = prepare_split(opt, cfg, pre.model.dof);
    auto ws = stage("windows", [&] { return windows_of(data.episodes, data.split.train, cfg, cfg.window_stride); });

    training::TransferConfig tcfg;
    tcfg.seed = opt.seed;
    tcfg.probe = train_config(cfg, opt, out);
    tcfg.probe.epochs = cfg.probe.epochs;
    tcfg.probe.max_steps = cfg.probe.max_steps;
    tcfg.fine_tune = tcfg.probe;
    tcfg.fine_tune.epochs = cfg.fine_tune.epochs;
    tcfg.fine_tune.max_steps = cfg.fine_tune.max_steps;
    tcfg.run_fine_tune = target == checkpoint::Stage::FineTune;
    auto result = stage("transfer", [&] { return training::transfer(opt.model, ws, tcfg); });

    checkpoint::Manifest m;
    m.model = result.model->config();
    m.stage = target;
    m.stats = result.stats;
    m.seed = opt.seed;
    m.steps = result.probe.steps + result.fine_tune.steps;
    m.test_episodes = names_of(data.episodes, data.split.test);
    stage("checkpoint", [&] { return checkpoint::save(out, *result.model, m); });
    save_effective_config(out, cfg);
    RunManifest manifest("transfer", opt);
    manifest.input(opt.model);
    manifest.input(opt.data);
    manifest.output(out / checkpoint::kBlobName);
    manifest.output(out / checkpoint::kManifestName);
    manifest.write(out);
    std::cout << "linear probe: ";
    report_training(result.probe);
    if (tcfg.run_fine_tune) {
        std::cout << "fine-tune: ";
        report_training(result.fine_tune);
    }
    return (result.probe.aborted || result.fine_tune.aborted) ? kExitRuntime : kExitOk;
}

std::unique_ptr<evaluation::Estimator> load_estimator(const fs::path& dir, checkpoint::Manifest& m)
{
    m = checkpoint::read_manifest(dir);
    const bool untrained = !m.trained();
    if (m.kind == "fdn") {
        model::FDN net(m.model);
        checkpoint::load_fdn(dir, net, m);
        return std::make_unique<evaluation::FdnEstimator>(net, m.stats, "fdn", untrained);
    }
    baselines::Baseline net(*m.baseline);
    checkpoint::load_baseline(dir, net, m);
    return std::make_unique<evaluation::BaselineEstimator>(net, m.stats, untrained);
}

std::vector<dataset::Episode> evaluation_episodes(std::vector<dataset::Episode> all, const checkpoint::Manifest& m)
{
    if (m.test_episodes.empty())
        return all;
    std::vector<dataset::Episode> out;
    for (auto& e : all)
        if (std::find(m.test_episodes.begin(), m.test_episodes.end(), e.name) != m.test_episodes.end())
            out.push_back(std::move(e));
    if (out.empty()) {
        log::warn("none of the checkpoint's held-out episodes are in the data directory; evaluating all episodes");
        return all;
    }
    return out;
}

int cmd_evaluate(const Options& opt)
{
    auto cfg = load_config(opt);
    const auto out = prepare_out(opt);
    if (opt.model.empty())
        throw StageError("arguments", "--model is required");
    const auto delays = delays_of(opt, cfg);
    checkpoint::Manifest m;
    auto est = stage("checkpoint", [&] { return load_estimator(opt.model, m); });
    auto episodes = evaluation_episodes(load_episodes(opt, cfg), m);
    auto reports = stage("evaluation", [&] {
        return evaluation::evaluate(*est, episodes, delays, cfg.eval, m.stats.w_std);
    });
    stage("report", [&] {
        evaluation::write_report_csv(out / "report.csv", reports);
        std::ofstream(out / "summary.txt") << evaluation::summarize(reports);
        return 0;
    });
    RunManifest manifest("evaluate", opt);
    manifest.input(opt.model);
    manifest.input(opt.data);
    manifest.output(out / "report.csv");
    manifest.output(out / "summary.txt");
    save_effective_config(out, cfg);
    manifest.write(out);
    std::cout << evaluation::summarize(reports);
    return kExitOk;
}

int cmd_ablate(const Options& opt)
{
    auto cfg = load_config(opt);
    const auto out = prepare_out(opt);
    std::vector<std::string> variants = {"full"};
    if (opt.flags.empty()) {
        for (const auto& f : model::AblationFlags::all_names())
            variants.push_back(f);
    } else {
        std::stringstream ss(opt.flags);
        std::string item;
        while (std::getline(ss, item, ','))
            if (!item.empty()) {
                stage("arguments", [&] { return model::AblationFlags::single(item); });
                variants.push_back(item);
            }
    }
    const auto delays = delays_of(opt, cfg);
    auto data = prepare_split(opt, cfg);
    cfg.model.dof = data.episodes.front().dof();
    std::vector<dataset::Episode> test;
    for (auto i : data.split.test)
        test.push_back(data.episodes[i]);

    std::vector<evaluation::MetricsReport> all;
    for (const auto& v : variants) {
        auto vcfg = cfg;
        vcfg.model.ablation = v == "full" ? model::AblationFlags{} : model::AblationFlags::single(v);
        const auto dir = out / v;
        fs::create_directories(dir);
        std::cout << "== " << v << '\n';
        Options vopt = opt;
        vopt.baseline.clear();
        if (const int code = train_into(dir, vcfg, vopt, data, "ablate " + v); code != kExitOk)
            return code;
        checkpoint::Manifest m;
        auto est = stage("checkpoint " + v, [&] { return load_estimator(dir, m); });
        auto reports = stage("evaluation " + v, [&] {
            return evaluation::evaluate(*est, test, delays, vcfg.eval, m.stats.w_std);
        });
        for (auto& r : reports)
            r.model = v;
        all.insert(all.end(), reports.begin(), reports.end());
    }
    stage("report", [&] {
        evaluation::write_report_csv(out / "ablation_report.csv", all);
        std::ofstream(out / "ablation_summary.txt") << evaluation::summarize(all);
        return 0;
    });
    RunManifest manifest("ablate", opt);
    manifest.input(opt.data);
    manifest.output(out / "ablation_report.csv");
    manifest.output(out / "ablation_summary.txt");
    manifest.write(out);
    std::cout << evaluation::summarize(all);
    return kExitOk;
}

int cmd_spectrum(const Options& opt)
{
    auto cfg = load_config(opt);
    const auto out = prepare_out(opt);
    auto episodes = load_episodes(opt, cfg);
    const int64_t len = cfg.model.history;
    std::vector<spectral::Series> windows;
    for (const auto& e : episodes)
        for (int64_t s = 0; s + len <= e.steps(); s += len)
            windows.push_back({e.W.narrow(1, s, len).contiguous(), e.sample_rate});
    auto spectrum = stage("spectrum", [&] {
        if (windows.empty())
            throw std::runtime_error("episodes shorter than one window of " + std::to_string(len) + " steps");
        return spectral::energy_spectrum(windows);
    });
    auto high = spectral::energy_fraction_above(spectrum, cfg.model.filter.cutoff_hz);
    {
        std::ofstream os(out / "spectrum.csv");
        os << "frequency_hz";
        for (const char* c : evaluation::kChannelNames)
            os << ',' << c;
        os << '\n';
        os.precision(10);
        for (size_t k = 0; k < spectrum.frequencies.size(); ++k) {
            os << spectrum.frequencies[k];
            for (int c = 0; c < 6; ++c)
                os << ',' << spectrum.energy[c][static_cast<int64_t>(k)].item<double>();
            os << '\n';
        }
    }
    std::ostringstream summary;
    summary << std::fixed << std::setprecision(3) << "energy share per channel, cutoff " << cfg.model.filter.cutoff_hz
            << " Hz, " << windows.size() << " windows of " << len << " steps\n";
    for (int c = 0; c < 6; ++c) {
        const double h = high[c].item<double>();
        summary << evaluation::kChannelNames[static_cast<size_t>(c)] << ": low " << 100.0 * (1.0 - h) << "%  high "
                << 100.0 * h << "%\n";
    }
    summary << "mean: low " << 100.0 * (1.0 - high.mean().item<double>()) << "%  high "
            << 100.0 * high.mean().item<double>() << "%\n";
    std::ofstream(out / "spectrum_summary.txt") << summary.str();
    RunManifest manifest("spectrum", opt);
    manifest.input(opt.data);
    manifest.output(out / "spectrum.csv");
    manifest.output(out / "spectrum_summary.txt");
    save_effective_config(out, cfg);
    manifest.write(out);
    std::cout << summary.str();
    return kExitOk;
}

int cmd_plot(const Options& opt)
{
    auto cfg = load_config(opt);
    const auto out = prepare_out(opt);
    if (opt.model.empty())
        throw StageError("arguments", "--model is required");
    const auto delay = delays_of(opt, cfg).front();
    checkpoint::Manifest m;
    auto est = stage("checkpoint", [&] { return load_estimator(opt.model, m); });
    auto episodes = evaluation_episodes(load_episodes(opt, cfg), m);
    const auto count = std::min<size_t>(episodes.size(), static_cast<size_t>(std::max(1, opt.episodes)));
    RunManifest manifest("plot", opt);
    manifest.input(opt.model);
    manifest.input(opt.data);
    for (size_t i = 0; i < count; ++i) {
        const auto& e = episodes[i];
        evaluation::DelaySpec spec{delay, est->pointwise() ? evaluation::DelayMode::ZohPoint
                                                            : evaluation::DelayMode::DelayCompensated};
        auto rec = stage("reconstruction", [&] { return evaluation::reconstruct_episode(*est, e, spec); });
        std::ostringstream name;
        name << "plot_" << e.name << "_" << delay << "ms.svg";
        const auto path = out / name.str();
        stage("plot", [&] {
            evaluation::write_plot_svg(path, e, rec, est->name() + " / " + e.name + " / " + name.str());
            return 0;
        });
        manifest.output(path);
    }
    manifest.write(out);
    std::cout << "wrote " << count << " plots to " << out.string() << '\n';
    return kExitOk;
}

}  // namespace

int run(const std::vector<std::string>& args)
{
    torch::set_num_threads(1);
    CLI::App app{"Frequency-aware decomposition network for probabilistic wrench forecasting", "fdn"};
    app.require_subcommand(1, 1);
    Options opt;

    auto common = [&](CLI::App* sub) {
        sub->add_option("--config", opt.config, "key = value configuration file")->check(CLI::ExistingFile);
        sub->add_option("--seed", opt.seed, "seed for every random stream");
        sub->add_option("--out", opt.out, "output directory")->required();
    };
    auto with_data = [&](CLI::App* sub, bool required) {
        auto o = sub->add_option("--data", opt.data, "directory of episode files");
        if (required)
            o->required();
    };

    auto* synth = app.add_subcommand("synth", "generate synthetic episodes");
    common(synth);
    synth->add_option("--episodes", opt.episodes, "number of episodes");

    auto* pre = app.add_subcommand("preprocess", "denoise, align and differentiate episodes");
    common(pre);
    with_data(pre, true);

    auto* train = app.add_subcommand("train", "train FDN or a baseline");
    common(train);
    with_data(train, true);
    train->add_option("--flags", opt.flags, "comma-separated ablation flags");
    train->add_option("--baseline", opt.baseline, "point_mlp, seq2seq_patch or seq2seq_patch_gaussian");

    auto* pretrain = app.add_subcommand("pretrain", "masked pretraining on the surrogate corpus");
    common(pretrain);
    with_data(pretrain, false);
    pretrain->add_option("--data-util", opt.data_util, "percentage of pretraining windows used");

    auto* transfer = app.add_subcommand("transfer", "linear probe and fine-tune from a pretrained checkpoint");
    common(transfer);
    with_data(transfer, true);
    transfer->add_option("--model", opt.model, "pretrained checkpoint directory")->required();
    transfer->add_option("--stage", opt.stage, "linear_probe or fine_tune");

    auto* evaluate = app.add_subcommand("evaluate", "delayed-estimation evaluation");
    common(evaluate);
    with_data(evaluate, true);
    evaluate->add_option("--model", opt.model, "checkpoint directory")->required();
    evaluate->add_option("--delays", opt.delays, "comma-separated delays in ms");

    auto* ablate = app.add_subcommand("ablate", "train and evaluate one model per ablation flag");
    common(ablate);
    with_data(ablate, true);
    ablate->add_option("--flags", opt.flags, "comma-separated ablation flags (default: all)");
    ablate->add_option("--delays", opt.delays, "comma-separated delays in ms");

    auto* spectrum = app.add_subcommand("spectrum", "wrench energy spectrum");
    common(spectrum);
    with_data(spectrum, true);

    auto* plot = app.add_subcommand("plot", "reconstruction overlays with the 3-sigma band");
    common(plot);
    with_data(plot, true);
    plot->add_option("--model", opt.model, "checkpoint directory")->required();
    plot->add_option("--episodes", opt.episodes, "number of episodes to plot");
    plot->add_option("--delays", opt.delays, "delay in ms (first value used)");

    std::vector<std::string> rest(args.begin() + (args.empty() ? 0 : 1), args.end());
    std::reverse(rest.begin(), rest.end());
    try {
        app.parse(rest);
    } catch (const CLI::ParseError& err) {
        const int code = app.exit(err);
        return code == 0 ? kExitOk : kExitUsage;
    }

    auto* sub = app.get_subcommands().front();
    const std::string name = sub->get_name();
    try {
        if (name == "synth")
            return cmd_synth(opt);
        if (name == "preprocess")
            return cmd_preprocess(opt);
        if (name == "train")
            return cmd_train(opt);
        if (name == "pretrain")
            return cmd_pretrain(opt);
        if (name == "transfer")
            return cmd_transfer(opt);
        if (name == "evaluate")
            return cmd_evaluate(opt);
        if (name == "ablate")
            return cmd_ablate(opt);
        if (name == "spectrum")
            return cmd_spectrum(opt);
        return cmd_plot(opt);
    } catch (const StageError& err) {
        std::cerr << "fdn " << name << ": " << err.what() << '\n';
        return err.usage ? kExitUsage : kExitRuntime;
    } catch (const std::exception& err) {
        std::cerr << "fdn " << name << ": " << err.what() << '\n';
    }
    return kExitRuntime;
}

int run(int argc, char** argv)
{
    return run(std::vector<std::string>(argv, argv + argc));
}

}  // namespace fdn::cli
