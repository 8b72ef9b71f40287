#include "fdn/checkpoint.hpp"

#include <openssl/evp.h>

#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <stdexcept>

namespace fdn::checkpoint {

namespace {

constexpr char kMagic[8] = {'F', 'D', 'N', 'P', 'A', 'R', '0', '1'};

std::vector<std::pair<std::string, torch::Tensor>> named_tensors(torch::nn::Module& module)
{
    std::vector<std::pair<std::string, torch::Tensor>> out;
    for (const auto& item : module.named_parameters())
        out.emplace_back(item.key(), item.value());
    for (const auto& item : module.named_buffers())
        out.emplace_back(item.key(), item.value());
    return out;
}

template <typename T>
void put(std::string& out, T value)
{
    out.append(reinterpret_cast<const char*>(&value), sizeof value);
}

template <typename T>
T take(const std::string& in, size_t& pos)
{
    if (pos + sizeof(T) > in.size())
        throw std::runtime_error("checkpoint: truncated parameter blob");
    T value;
    std::memcpy(&value, in.data() + pos, sizeof value);
    pos += sizeof value;
    return value;
}

void append_tensor(std::string& out, const std::string& name, const torch::Tensor& t)
{
    put<uint32_t>(out, static_cast<uint32_t>(name.size()));
    out += name;
    put<uint32_t>(out, static_cast<uint32_t>(t.dim()));
    for (auto d : t.sizes())
        put<int64_t>(out, d);
    auto data = t.detach().to(torch::kFloat64).contiguous();
    out.append(reinterpret_cast<const char*>(data.data_ptr<double>()), data.numel() * sizeof(double));
}

bool has_prefix(const std::string& name, const std::vector<std::string>& prefixes)
{
    if (prefixes.empty())
        return true;
    for (const auto& p : prefixes)
        if (name.rfind(p, 0) == 0)
            return true;
    return false;
}

std::string join(const torch::Tensor& v)
{
    if (!v.defined())
        return "";
    auto flat = v.to(torch::kFloat64).contiguous().view(-1);
    std::ostringstream os;
    os.precision(17);
    for (int64_t i = 0; i < flat.size(0); ++i)
        os << (i ? "," : "") << flat[i].item<double>();
    return os.str();
}

torch::Tensor split_numbers(const std::string& text)
{
    std::vector<double> values;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ','))
        if (!item.empty())
            values.push_back(std::stod(item));
    return torch::tensor(values, torch::kFloat64);
}

std::string trim(const std::string& s)
{
    const auto b = s.find_first_not_of(" \t\r");
    const auto e = s.find_last_not_of(" \t\r");
    return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
}

const std::string& need(const std::map<std::string, std::string>& kv, const std::string& key)
{
    auto it = kv.find(key);
    if (it == kv.end())
        throw std::runtime_error("checkpoint manifest: missing key '" + key + "'");
    return it->second;
}

std::string read_file(const std::filesystem::path& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw std::runtime_error("cannot read " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

}  // namespace

std::string to_string(Stage stage)
{
    switch (stage) {
    case Stage::Scratch:
        return "scratch";
    case Stage::Pretrain:
        return "pretrain";
    case Stage::LinearProbe:
        return "linear_probe";
    case Stage::FineTune:
        return "fine_tune";
    }
    throw std::logic_error("unreachable stage");
}

Stage parse_stage(const std::string& name)
{
    for (auto s : {Stage::Scratch, Stage::Pretrain, Stage::LinearProbe, Stage::FineTune})
        if (to_string(s) == name)
            return s;
    throw std::invalid_argument("unknown stage '" + name + "' (expected scratch, pretrain, linear_probe or fine_tune)");
}

std::string sha256_hex(const std::string& bytes)
{
    unsigned char digest[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1)
        throw std::runtime_error("sha256 failed");
    std::ostringstream os;
    for (unsigned int i = 0; i < len; ++i)
        os << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(digest[i]);
    return os.str();
}

std::string sha256_file(const std::filesystem::path& path)
{
    return sha256_hex(read_file(path));
}

std::string serialize_parameters(torch::nn::Module& module)
{
    std::string out(kMagic, sizeof kMagic);
    auto tensors = named_tensors(module);
    put<uint32_t>(out, static_cast<uint32_t>(tensors.size()));
    for (const auto& [name, t] : tensors)
        append_tensor(out, name, t);
    return out;
}

void deserialize_parameters(torch::nn::Module& module, const std::string& blob)
{
    if (blob.size() < sizeof kMagic || std::memcmp(blob.data(), kMagic, sizeof kMagic) != 0)
        throw std::runtime_error("checkpoint: not a parameter blob");
    size_t pos = sizeof kMagic;
    const auto count = take<uint32_t>(blob, pos);
    auto tensors = named_tensors(module);
    if (count != tensors.size())
        throw std::runtime_error("checkpoint: tensor count " + std::to_string(count) + " does not match model (" +
                                 std::to_string(tensors.size()) + ")");
    torch::NoGradGuard no_grad;
    for (auto& [name, t] : tensors) {
        const auto name_len = take<uint32_t>(blob, pos);
        if (pos + name_len > blob.size())
            throw std::runtime_error("checkpoint: truncated parameter blob");
        const std::string stored(blob.data() + pos, name_len);
        pos += name_len;
        if (stored != name)
            throw std::runtime_error("checkpoint: expected tensor '" + name + "', found '" + stored + "'");
        const auto dims = take<uint32_t>(blob, pos);
        std::vector<int64_t> shape(dims);
        for (auto& d : shape)
            d = take<int64_t>(blob, pos);
        if (shape != t.sizes().vec())
            throw std::runtime_error("checkpoint: shape mismatch for '" + name + "'");
        const auto bytes = static_cast<size_t>(t.numel()) * sizeof(double);
        if (pos + bytes > blob.size())
            throw std::runtime_error("checkpoint: truncated parameter blob");
        auto values = torch::empty(shape, torch::kFloat64);
        std::memcpy(values.data_ptr<double>(), blob.data() + pos, bytes);
        pos += bytes;
        t.copy_(values);
    }
    if (pos != blob.size())
        throw std::runtime_error("checkpoint: trailing bytes in parameter blob");
}

std::string parameter_hash(torch::nn::Module& module, const std::vector<std::string>& prefixes)
{
    std::string bytes;
    for (const auto& [name, t] : named_tensors(module))
        if (has_prefix(name, prefixes))
            append_tensor(bytes, name, t);
    return sha256_hex(bytes);
}

void write_model_config(std::ostream& os, const std::string& p, const model::ModelConfig& c)
{
    os << p << "dof = " << c.dof << '\n'
       << p << "history = " << c.history << '\n'
       << p << "horizon = " << c.horizon << '\n'
       << p << "latent = " << c.latent << '\n'
       << p << "patch = " << c.patch << '\n'
       << p << "stride = " << c.stride << '\n'
       << p << "experts = " << c.experts << '\n'
       << p << "cutoff_hz = " << c.filter.cutoff_hz << '\n'
       << p << "denoise_cutoff_hz = " << c.filter.denoise_cutoff_hz << '\n'
       << p << "order = " << c.filter.order << '\n'
       << p << "sample_rate = " << c.filter.sample_rate << '\n'
       << p << "mask_u = " << (c.mask_u ? 1 : 0) << '\n'
       << p << "ablation = " << c.ablation.to_string() << '\n'
       << p << "encoder_layers = " << c.encoder.layers << '\n'
       << p << "encoder_heads = " << c.encoder.heads << '\n'
       << p << "encoder_ffn_multiplier = " << c.encoder.ffn_multiplier << '\n';
}

model::ModelConfig read_model_config(const std::map<std::string, std::string>& kv, const std::string& p)
{
    auto i = [&](const char* k) { return std::stoi(need(kv, p + k)); };
    auto d = [&](const char* k) { return std::stod(need(kv, p + k)); };
    model::ModelConfig c;
    c.dof = i("dof");
    c.history = i("history");
    c.horizon = i("horizon");
    c.latent = i("latent");
    c.patch = i("patch");
    c.stride = i("stride");
    c.experts = i("experts");
    c.filter.cutoff_hz = d("cutoff_hz");
    c.filter.denoise_cutoff_hz = d("denoise_cutoff_hz");
    c.filter.order = i("order");
    c.filter.sample_rate = d("sample_rate");
    c.mask_u = i("mask_u") != 0;
    c.ablation = model::AblationFlags::parse(need(kv, p + "ablation"));
    c.encoder.layers = i("encoder_layers");
    c.encoder.heads = i("encoder_heads");
    c.encoder.ffn_multiplier = i("encoder_ffn_multiplier");
    return c;
}

Manifest save(const std::filesystem::path& dir, torch::nn::Module& module, Manifest m)
{
    std::filesystem::create_directories(dir);
    const auto blob = serialize_parameters(module);
    m.hash = sha256_hex(blob);
    {
        std::ofstream out(dir / kBlobName, std::ios::binary);
        if (!out)
            throw std::runtime_error("cannot write " + (dir / kBlobName).string());
        out.write(blob.data(), static_cast<std::streamsize>(blob.size()));
    }
    std::ofstream os(dir / kManifestName);
    if (!os)
        throw std::runtime_error("cannot write " + (dir / kManifestName).string());
    os.precision(17);
    os << "kind = " << m.kind << '\n'
       << "stage = " << to_string(m.stage) << '\n'
       << "seed = " << m.seed << '\n'
       << "steps = " << m.steps << '\n'
       << "hash = " << m.hash << '\n'
       << "revin_variance = biased\n";
    write_model_config(os, "model.", m.model);
    if (m.baseline) {
        os << "baseline.mlp_width = " << m.baseline->mlp_width << '\n'
           << "baseline.mlp_depth = " << m.baseline->mlp_depth << '\n';
    }
    os << "stats.x_mean = " << join(m.stats.x_mean) << '\n'
       << "stats.x_std = " << join(m.stats.x_std) << '\n'
       << "stats.abs_q_mean = " << join(m.stats.abs_q_mean) << '\n'
       << "stats.abs_q_std = " << join(m.stats.abs_q_std) << '\n'
       << "stats.w_mean = " << join(m.stats.w_mean) << '\n'
       << "stats.w_std = " << join(m.stats.w_std) << '\n';
    os << "test_episodes = ";
    for (size_t k = 0; k < m.test_episodes.size(); ++k)
        os << (k ? "," : "") << m.test_episodes[k];
    os << '\n';
    return m;
}

Manifest read_manifest(const std::filesystem::path& dir)
{
    std::ifstream in(dir / kManifestName);
    if (!in)
        throw std::runtime_error("no checkpoint manifest in " + dir.string());
    std::map<std::string, std::string> kv;
    std::string line;
    while (std::getline(in, line)) {
        const auto eq = line.find('=');
        if (eq == std::string::npos || line.empty() || line[0] == '#')
            continue;
        kv[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
    }
    Manifest m;
    m.kind = need(kv, "kind");
    m.stage = parse_stage(need(kv, "stage"));
    m.seed = std::stoull(need(kv, "seed"));
    m.steps = std::stoll(need(kv, "steps"));
    m.hash = need(kv, "hash");
    m.model = read_model_config(kv, "model.");
    if (m.kind != "fdn") {
        auto b = baselines::BaselineConfig::matching(baselines::parse_baseline(m.kind), m.model);
        b.mlp_width = std::stoi(need(kv, "baseline.mlp_width"));
        b.mlp_depth = std::stoi(need(kv, "baseline.mlp_depth"));
        m.baseline = b;
    }
    m.stats.x_mean = split_numbers(need(kv, "stats.x_mean"));
    m.stats.x_std = split_numbers(need(kv, "stats.x_std"));
    m.stats.abs_q_mean = split_numbers(need(kv, "stats.abs_q_mean"));
    m.stats.abs_q_std = split_numbers(need(kv, "stats.abs_q_std"));
    m.stats.w_mean = split_numbers(need(kv, "stats.w_mean"));
    m.stats.w_std = split_numbers(need(kv, "stats.w_std"));
    std::stringstream names(kv.count("test_episodes") ? kv["test_episodes"] : "");
    std::string item;
    while (std::getline(names, item, ','))
        if (!item.empty())
            m.test_episodes.push_back(item);
    return m;
}

namespace {

void load_blob(const std::filesystem::path& dir, torch::nn::Module& module, const Manifest& m)
{
    const auto blob = read_file(dir / kBlobName);
    if (sha256_hex(blob) != m.hash)
        throw std::runtime_error("checkpoint " + dir.string() + ": parameter hash does not match manifest");
    deserialize_parameters(module, blob);
}

}  // namespace

void load_fdn(const std::filesystem::path& dir, model::FDN& model, const Manifest& m)
{
    if (m.kind != "fdn")
        throw std::runtime_error("checkpoint " + dir.string() + " holds a '" + m.kind + "' model, not fdn");
    if (!model->config().compatible_with(m.model))
        throw std::runtime_error("checkpoint " + dir.string() + ": model configuration does not match");
    load_blob(dir, *model, m);
}

void load_baseline(const std::filesystem::path& dir, baselines::Baseline& model, const Manifest& m)
{
    if (!m.baseline || !(model->config() == *m.baseline))
        throw std::runtime_error("checkpoint " + dir.string() + ": baseline configuration does not match");
    load_blob(dir, *model, m);
}

size_t copy_parameters(torch::nn::Module& source, torch::nn::Module& target, const std::vector<std::string>& prefixes)
{
    auto src = source.named_parameters();
    auto src_buffers = source.named_buffers();
    size_t copied = 0;
    torch::NoGradGuard no_grad;
    auto copy_from = [&](const torch::OrderedDict<std::string, torch::Tensor>& from,
                         torch::OrderedDict<std::string, torch::Tensor> to) {
        for (auto& item : to) {
            if (!has_prefix(item.key(), prefixes))
                continue;
            const auto* s = from.find(item.key());
            if (!s)
                throw std::runtime_error("transfer: source lacks tensor '" + item.key() + "'");
            if (s->sizes() != item.value().sizes())
                throw std::runtime_error("transfer: shape mismatch for '" + item.key() + "'");
            item.value().copy_(*s);
            ++copied;
        }
    };
    copy_from(src, target.named_parameters());
    copy_from(src_buffers, target.named_buffers());
    return copied;
}

}  // namespace fdn::checkpoint
