#include "dfssm/config.hpp"

#include <cmath>
#include <fstream>
#include <sstream>
#include <vector>

namespace dfssm {

void ModelConfig::validate() const {
    if (c < 4 || c % 2 != 0)
        throw ConfigError("model channels C must be even and >= 4, got " + std::to_string(c));
    if (n_s < 0 || n_f < 0 || n_s + n_f < 1)
        throw ConfigError("n_s + n_f must be >= 1, got n_s=" + std::to_string(n_s) +
                          " n_f=" + std::to_string(n_f));
    if (levels < 1 || levels > 4)
        throw ConfigError("levels must be in [1,4], got " + std::to_string(levels));
    if (state_dim < 1) throw ConfigError("state_dim must be >= 1");
    if (expand < 1) throw ConfigError("expand must be >= 1");
    if (lambda_f < 0) throw ConfigError("lambda_f must be >= 0");
    const double gc = gamma * c;
    const long long g = std::llround(gc);
    if (std::abs(gc - static_cast<double>(g)) > 1e-9 || g < 2 || g % 2 != 0)
        throw ConfigError("gamma*C must be a positive even integer");
}

void TrainConfig::validate() const {
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (patch_size < 1) throw ConfigError("patch_size must be >= 1");
    if (lr_init <= 0 || lr_final <= 0) throw ConfigError("learning rates must be positive");
    if (lr_final >= lr_init) throw ConfigError("lr_final must be < lr_init");
    if (beta1 <= 0 || beta1 >= 1 || beta2 <= 0 || beta2 >= 1)
        throw ConfigError("adam betas must lie in (0,1)");
    if (weight_decay < 0) throw ConfigError("weight_decay must be >= 0");
    if (adam_eps <= 0) throw ConfigError("adam_eps must be positive");
    if (grad_clip < 0) throw ConfigError("grad_clip must be >= 0");
    if (checkpoint_every < 0 || log_every < 1)
        throw ConfigError("cadence values must be positive");
}

namespace {

std::string trim(const std::string& s) {
    std::size_t b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    std::size_t e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw ConfigError("config key '" + key + "' expects a boolean, got '" + v + "'");
}

int parse_int(const std::string& key, const std::string& v) {
    try {
        std::size_t pos = 0;
        int r = std::stoi(v, &pos);
        if (pos != v.size()) throw std::invalid_argument("");
        return r;
    } catch (...) {
        throw ConfigError("config key '" + key + "' expects an integer, got '" + v + "'");
    }
}

std::int64_t parse_i64(const std::string& key, const std::string& v) {
    try {
        std::size_t pos = 0;
        long long r = std::stoll(v, &pos);
        if (pos != v.size()) throw std::invalid_argument("");
        return r;
    } catch (...) {
        throw ConfigError("config key '" + key + "' expects an integer, got '" + v + "'");
    }
}

double parse_double(const std::string& key, const std::string& v) {
    try {
        std::size_t pos = 0;
        double r = std::stod(v, &pos);
        if (pos != v.size()) throw std::invalid_argument("");
        return r;
    } catch (...) {
        throw ConfigError("config key '" + key + "' expects a number, got '" + v + "'");
    }
}

}  // namespace

RunConfig parse_config_text(const std::string& text) {
    std::vector<std::pair<std::string, std::string>> kvs;
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        std::size_t hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        std::size_t eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError("config line " + std::to_string(lineno) +
                              " is not 'key = value': " + line);
        std::string key = trim(line.substr(0, eq));
        std::string value = trim(line.substr(eq + 1));
        if (key.empty() || value.empty())
            throw ConfigError("config line " + std::to_string(lineno) + " has an empty key or value");
        kvs.emplace_back(key, value);
    }

    RunConfig cfg;
    // variant presets apply first, independent of line order
    for (auto& [key, value] : kvs) {
        if (key != "variant") continue;
        if (value == "dfssm") {
            cfg.model = ModelConfig::preset_dfssm();
        } else if (value == "dfssm-s") {
            cfg.model = ModelConfig::preset_dfssm_s();
        } else {
            throw ConfigError("unknown variant '" + value + "' (expected dfssm or dfssm-s)");
        }
    }
    for (auto& [key, value] : kvs) {
        if (key == "variant") {
            continue;
        } else if (key == "c") {
            cfg.model.c = parse_int(key, value);
        } else if (key == "n_s") {
            cfg.model.n_s = parse_int(key, value);
        } else if (key == "n_f") {
            cfg.model.n_f = parse_int(key, value);
        } else if (key == "gamma") {
            cfg.model.gamma = parse_double(key, value);
        } else if (key == "state_dim") {
            cfg.model.state_dim = parse_int(key, value);
        } else if (key == "expand") {
            cfg.model.expand = parse_int(key, value);
        } else if (key == "levels") {
            cfg.model.levels = parse_int(key, value);
        } else if (key == "conv_block") {
            if (value == "mgcb") {
                cfg.model.conv_block = ConvBlockKind::kMgcb;
            } else if (value == "conv_layer") {
                cfg.model.conv_block = ConvBlockKind::kConvLayer;
            } else {
                throw ConfigError("conv_block must be mgcb or conv_layer, got '" + value + "'");
            }
        } else if (key == "use_freq_loss") {
            cfg.model.use_freq_loss = parse_bool(key, value);
        } else if (key == "lambda_f") {
            cfg.model.lambda_f = parse_double(key, value);
        } else if (key == "iterations") {
            cfg.train.iterations = parse_i64(key, value);
        } else if (key == "batch_size") {
            cfg.train.batch_size = parse_int(key, value);
        } else if (key == "patch_size") {
            cfg.train.patch_size = parse_int(key, value);
        } else if (key == "lr_init") {
            cfg.train.lr_init = parse_double(key, value);
        } else if (key == "lr_final") {
            cfg.train.lr_final = parse_double(key, value);
        } else if (key == "beta1") {
            cfg.train.beta1 = parse_double(key, value);
        } else if (key == "beta2") {
            cfg.train.beta2 = parse_double(key, value);
        } else if (key == "weight_decay") {
            cfg.train.weight_decay = parse_double(key, value);
        } else if (key == "adam_eps") {
            cfg.train.adam_eps = parse_double(key, value);
        } else if (key == "grad_clip") {
            cfg.train.grad_clip = parse_double(key, value);
        } else if (key == "seed") {
            cfg.train.seed = static_cast<std::uint64_t>(parse_i64(key, value));
        } else if (key == "checkpoint_every") {
            cfg.train.checkpoint_every = parse_i64(key, value);
        } else if (key == "log_every") {
            cfg.train.log_every = parse_i64(key, value);
        } else {
            throw ConfigError("unknown config key '" + key + "'");
        }
    }
    cfg.model.validate();
    cfg.train.validate();
    return cfg;
}

RunConfig load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config file: " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse_config_text(ss.str());
}

std::string render_config(const RunConfig& cfg) {
    std::ostringstream out;
    out << "c = " << cfg.model.c << "\n";
    out << "n_s = " << cfg.model.n_s << "\n";
    out << "n_f = " << cfg.model.n_f << "\n";
    out << "gamma = " << cfg.model.gamma << "\n";
    out << "state_dim = " << cfg.model.state_dim << "\n";
    out << "expand = " << cfg.model.expand << "\n";
    out << "levels = " << cfg.model.levels << "\n";
    out << "conv_block = "
        << (cfg.model.conv_block == ConvBlockKind::kMgcb ? "mgcb" : "conv_layer") << "\n";
    out << "use_freq_loss = " << (cfg.model.use_freq_loss ? "true" : "false") << "\n";
    out << "lambda_f = " << cfg.model.lambda_f << "\n";
    if (cfg.train.iterations >= 0) out << "iterations = " << cfg.train.iterations << "\n";
    out << "batch_size = " << cfg.train.batch_size << "\n";
    out << "patch_size = " << cfg.train.patch_size << "\n";
    out << "lr_init = " << cfg.train.lr_init << "\n";
    out << "lr_final = " << cfg.train.lr_final << "\n";
    out << "beta1 = " << cfg.train.beta1 << "\n";
    out << "beta2 = " << cfg.train.beta2 << "\n";
    out << "weight_decay = " << cfg.train.weight_decay << "\n";
    out << "adam_eps = " << cfg.train.adam_eps << "\n";
    out << "grad_clip = " << cfg.train.grad_clip << "\n";
    out << "seed = " << cfg.train.seed << "\n";
    out << "checkpoint_every = " << cfg.train.checkpoint_every << "\n";
    out << "log_every = " << cfg.train.log_every << "\n";
    return out.str();
}

}  // namespace dfssm
