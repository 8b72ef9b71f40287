#include "fdn/config.hpp"

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include <functional>
#include <sstream>
#include <stdexcept>

namespace fdn::config {

namespace {

struct Field {
    std::string key;
    std::function<void(RunConfig&, const std::string&)> set;
    std::function<std::string(const RunConfig&)> get;
};

template <typename T>
T parse_value(const std::string& key, const std::string& text)
{
    std::istringstream is(text);
    T value{};
    if constexpr (std::is_same_v<T, bool>) {
        if (text == "true" || text == "1")
            return true;
        if (text == "false" || text == "0")
            return false;
        throw std::invalid_argument("config " + key + ": expected a boolean, got '" + text + "'");
    } else {
        is >> value;
        if (!is || !(is >> std::ws).eof())
            throw std::invalid_argument("config " + key + ": cannot parse '" + text + "'");
    }
    return value;
}

template <typename T>
std::string format_value(const T& v)
{
    std::ostringstream os;
    os.precision(17);
    if constexpr (std::is_same_v<T, bool>)
        os << (v ? "true" : "false");
    else
        os << v;
    return os.str();
}

template <typename T, typename Access>
Field field(std::string key, Access access)
{
    Field f;
    f.key = key;
    f.set = [key, access](RunConfig& c, const std::string& text) { access(c) = parse_value<T>(key, text); };
    f.get = [access](const RunConfig& c) { return format_value<T>(access(const_cast<RunConfig&>(c))); };
    return f;
}

template <typename T, typename Access>
Field filter_field(std::string key, Access access)
{
    Field f;
    f.key = key;
    f.set = [key, access](RunConfig& c, const std::string& text) {
        auto spec = c.model.filter;
        access(spec) = parse_value<T>(key, text);
        c.set_filter(spec);
    };
    f.get = [access](const RunConfig& c) {
        auto spec = c.model.filter;
        return format_value<T>(access(spec));
    };
    return f;
}

#define FDN_FIELD(T, KEY, EXPR) field<T>(KEY, [](RunConfig& c) -> T& { return EXPR; })

const std::vector<Field>& fields()
{
    static const std::vector<Field> all = [] {
        std::vector<Field> f;
        f.push_back(filter_field<double>("filter.cutoff_hz", [](spectral::FilterSpec& s) -> double& { return s.cutoff_hz; }));
        f.push_back(filter_field<double>("filter.denoise_cutoff_hz",
                                         [](spectral::FilterSpec& s) -> double& { return s.denoise_cutoff_hz; }));
        f.push_back(filter_field<int>("filter.order", [](spectral::FilterSpec& s) -> int& { return s.order; }));
        f.push_back(filter_field<double>("filter.sample_rate", [](spectral::FilterSpec& s) -> double& { return s.sample_rate; }));

        f.push_back(FDN_FIELD(int, "synth.dof", c.synth.dof));
        f.push_back(FDN_FIELD(double, "synth.duration_s", c.synth.duration_s));
        f.push_back(FDN_FIELD(double, "synth.static_s", c.synth.static_s));
        f.push_back(FDN_FIELD(double, "synth.ramp_s", c.synth.ramp_s));
        f.push_back(FDN_FIELD(uint64_t, "synth.trend_seed", c.synth.trend_seed));
        f.push_back(FDN_FIELD(uint64_t, "synth.envelope_seed", c.synth.envelope_seed));
        f.push_back(FDN_FIELD(double, "synth.trend_band_hz", c.synth.trend_band_hz));
        f.push_back(FDN_FIELD(double, "synth.trend_gain", c.synth.trend_gain));
        f.push_back(FDN_FIELD(double, "synth.trend_force_n", c.synth.trend_force_n));
        f.push_back(FDN_FIELD(double, "synth.trend_torque_nm", c.synth.trend_torque_nm));
        f.push_back(FDN_FIELD(double, "synth.residual_force_n", c.synth.residual_force_n));
        f.push_back(FDN_FIELD(double, "synth.residual_torque_nm", c.synth.residual_torque_nm));
        f.push_back(FDN_FIELD(double, "synth.envelope_gain", c.synth.envelope_gain));
        f.push_back(FDN_FIELD(double, "synth.q_noise_rad", c.synth.q_noise_rad));
        f.push_back(FDN_FIELD(double, "synth.u_noise", c.synth.u_noise));
        f.push_back(FDN_FIELD(double, "synth.wrench_noise", c.synth.wrench_noise));
        f.push_back(FDN_FIELD(double, "synth.wrench_offset", c.synth.wrench_offset));

        f.push_back(FDN_FIELD(int, "preprocess.savgol_window", c.savgol.window));
        f.push_back(FDN_FIELD(int, "preprocess.savgol_order", c.savgol.order));

        f.push_back(FDN_FIELD(int, "model.history", c.model.history));
        f.push_back(FDN_FIELD(int, "model.horizon", c.model.horizon));
        f.push_back(FDN_FIELD(int, "model.latent", c.model.latent));
        f.push_back(field<int>("model.patch", [](RunConfig& c) -> int& { return c.model.patch; }));
        f.back().set = [](RunConfig& c, const std::string& text) {
            c.model.patch = parse_value<int>("model.patch", text);
            c.model.stride = c.model.patch;
        };
        f.push_back(FDN_FIELD(int, "model.experts", c.model.experts));
        f.push_back(FDN_FIELD(int, "model.encoder_layers", c.model.encoder.layers));
        f.push_back(FDN_FIELD(int, "model.encoder_heads", c.model.encoder.heads));
        f.push_back(FDN_FIELD(int, "model.encoder_ffn_multiplier", c.model.encoder.ffn_multiplier));
        Field ablation;
        ablation.key = "model.ablation";
        ablation.set = [](RunConfig& c, const std::string& text) { c.model.ablation = model::AblationFlags::parse(text); };
        ablation.get = [](const RunConfig& c) { return c.model.ablation.to_string(); };
        f.push_back(ablation);

        f.push_back(FDN_FIELD(int, "baseline.mlp_width", c.mlp_width));
        f.push_back(FDN_FIELD(int, "baseline.mlp_depth", c.mlp_depth));

        f.push_back(FDN_FIELD(int, "train.batch_size", c.train.batch_size));
        f.push_back(FDN_FIELD(int, "train.epochs", c.train.epochs));
        f.push_back(FDN_FIELD(int64_t, "train.max_steps", c.train.max_steps));
        f.push_back(FDN_FIELD(double, "train.learning_rate", c.train.learning_rate));
        f.push_back(FDN_FIELD(double, "train.clip_norm", c.train.clip_norm));
        f.push_back(FDN_FIELD(int, "train.window_stride", c.window_stride));
        f.push_back(FDN_FIELD(double, "train.test_fraction", c.test_fraction));

        f.push_back(FDN_FIELD(int, "pretrain.episodes", c.corpus.episodes));
        f.push_back(FDN_FIELD(double, "pretrain.duration_s", c.corpus.synth.duration_s));
        f.push_back(FDN_FIELD(double, "pretrain.trend_gain", c.corpus.synth.trend_gain));
        f.push_back(FDN_FIELD(double, "pretrain.residual_force_n", c.corpus.synth.residual_force_n));
        f.push_back(FDN_FIELD(double, "pretrain.residual_torque_nm", c.corpus.synth.residual_torque_nm));
        f.push_back(FDN_FIELD(int, "pretrain.window_stride", c.pretrain_stride));
        f.push_back(FDN_FIELD(int64_t, "pretrain.iterations", c.pretrain_iterations));

        f.push_back(FDN_FIELD(int, "transfer.probe_epochs", c.probe.epochs));
        f.push_back(FDN_FIELD(int64_t, "transfer.probe_steps", c.probe.max_steps));
        f.push_back(FDN_FIELD(int, "transfer.fine_tune_epochs", c.fine_tune.epochs));
        f.push_back(FDN_FIELD(int64_t, "transfer.fine_tune_steps", c.fine_tune.max_steps));

        f.push_back(FDN_FIELD(int64_t, "evaluate.window", c.eval.window));
        Field delays;
        delays.key = "evaluate.delays";
        delays.set = [](RunConfig& c, const std::string& text) { c.delays_ms = parse_numbers(text); };
        delays.get = [](const RunConfig& c) {
            std::string out;
            for (size_t i = 0; i < c.delays_ms.size(); ++i)
                out += (i ? "," : "") + format_value(c.delays_ms[i]);
            return out;
        };
        f.push_back(delays);
        return f;
    }();
    return all;
}

#undef FDN_FIELD

}  // namespace

RunConfig::RunConfig()
{
    corpus.synth = training::surrogate_synth_config();
    set_filter(model.filter);
}

void RunConfig::set_filter(const spectral::FilterSpec& spec)
{
    model.filter = spec;
    synth.filter = spec;
    synth.sample_rate = spec.sample_rate;
    corpus.synth.filter = spec;
    corpus.synth.sample_rate = spec.sample_rate;
    eval.filter = spec;
}

void apply(RunConfig& cfg, const std::string& key, const std::string& value)
{
    for (const auto& f : fields()) {
        if (f.key == key) {
            f.set(cfg, value);
            return;
        }
    }
    throw std::invalid_argument("unknown config key '" + key + "'");
}

RunConfig load(const std::filesystem::path& path)
{
    boost::property_tree::ptree tree;
    try {
        boost::property_tree::ini_parser::read_ini(path.string(), tree);
    } catch (const boost::property_tree::ini_parser_error& err) {
        throw std::invalid_argument("config " + path.string() + ": " + err.message() + " (line " +
                                    std::to_string(err.line()) + ")");
    }
    RunConfig cfg;
    for (const auto& [section, entries] : tree) {
        if (entries.empty())
            throw std::invalid_argument("config " + path.string() + ": key '" + section + "' outside a section");
        for (const auto& [key, value] : entries)
            apply(cfg, section + "." + key, value.get_value<std::string>());
    }
    return cfg;
}

void write(std::ostream& os, const RunConfig& cfg)
{
    std::string current;
    for (const auto& f : fields()) {
        const auto dot = f.key.find('.');
        const auto section = f.key.substr(0, dot);
        if (section != current) {
            os << (current.empty() ? "" : "\n") << '[' << section << "]\n";
            current = section;
        }
        os << f.key.substr(dot + 1) << " = " << f.get(cfg) << '\n';
    }
}

std::vector<double> parse_numbers(const std::string& list)
{
    std::vector<double> out;
    std::stringstream ss(list);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (item.empty())
            continue;
        size_t used = 0;
        double v = 0.0;
        try {
            v = std::stod(item, &used);
        } catch (const std::exception&) {
            used = 0;
        }
        if (used != item.size())
            throw std::invalid_argument("cannot parse number '" + item + "'");
        out.push_back(v);
    }
    if (out.empty())
        throw std::invalid_argument("empty number list");
    return out;
}

}  // namespace fdn::config
