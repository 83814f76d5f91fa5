#pragma once

#include <map>
#include <sstream>

#include "fsta/train.hpp"

namespace fsta {

using KeyValues = std::map<std::string, std::string>;

/// Flat key=value text, one pair per line; '#' starts a comment.
inline KeyValues parse_key_values(std::istream& is) {
    KeyValues kv;
    std::string line;
    while (std::getline(is, line)) {
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        const auto eq = line.find('=');
        if (eq == std::string::npos) continue;
        auto trim = [](std::string s) {
            const auto a = s.find_first_not_of(" \t\r");
            const auto b = s.find_last_not_of(" \t\r");
            return a == std::string::npos ? std::string{} : s.substr(a, b - a + 1);
        };
        std::string key = trim(line.substr(0, eq));
        std::string val = trim(line.substr(eq + 1));
        if (!key.empty()) kv[key] = val;
    }
    return kv;
}

inline KeyValues parse_key_values_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot open config: " + path);
    return parse_key_values(is);
}

namespace detail {

inline std::size_t kv_size(const KeyValues& kv, const std::string& key, std::size_t dflt) {
    auto it = kv.find(key);
    return it == kv.end() ? dflt : static_cast<std::size_t>(std::stoull(it->second));
}
inline double kv_double(const KeyValues& kv, const std::string& key, double dflt) {
    auto it = kv.find(key);
    return it == kv.end() ? dflt : std::stod(it->second);
}
inline std::string kv_str(const KeyValues& kv, const std::string& key, const std::string& dflt) {
    auto it = kv.find(key);
    return it == kv.end() ? dflt : it->second;
}

}  // namespace detail

inline NetConfig net_config_from(const KeyValues& kv) {
    NetConfig c;
    c.base_channels = detail::kv_size(kv, "net.base_channels", c.base_channels);
    c.depth = detail::kv_size(kv, "net.depth", c.depth);
    c.growth = detail::kv_size(kv, "net.growth", c.growth);
    c.dense_layers = detail::kv_size(kv, "net.dense_layers", c.dense_layers);
    c.T = detail::kv_size(kv, "net.t", c.T);
    c.fusion = fusion_mode_from(detail::kv_str(kv, "net.fusion", fusion_mode_name(c.fusion)));
    c.fsta_M = detail::kv_size(kv, "net.fsta_m", c.fsta_M);
    c.fsta_N = detail::kv_size(kv, "net.fsta_n", c.fsta_N);
    c.fsta_kernel = detail::kv_size(kv, "net.fsta_kernel", c.fsta_kernel);
    return c;
}

inline void net_config_to(const NetConfig& c, std::ostream& os) {
    os << "net.base_channels = " << c.base_channels << "\n"
       << "net.depth = " << c.depth << "\n"
       << "net.growth = " << c.growth << "\n"
       << "net.dense_layers = " << c.dense_layers << "\n"
       << "net.t = " << c.T << "\n"
       << "net.fusion = " << fusion_mode_name(c.fusion) << "\n"
       << "net.fsta_m = " << c.fsta_M << "\n"
       << "net.fsta_n = " << c.fsta_N << "\n"
       << "net.fsta_kernel = " << c.fsta_kernel << "\n";
}

inline TrainConfig train_config_from(const KeyValues& kv) {
    TrainConfig c;
    c.patch = detail::kv_size(kv, "train.patch", c.patch);
    c.batch = detail::kv_size(kv, "train.batch", c.batch);
    c.lr = detail::kv_double(kv, "train.lr", c.lr);
    c.lr_halve_every = detail::kv_size(kv, "train.lr_halve_every", c.lr_halve_every);
    c.steps = detail::kv_size(kv, "train.steps", c.steps);
    c.seed = detail::kv_size(kv, "train.seed", static_cast<std::size_t>(c.seed));
    const std::string loss = detail::kv_str(kv, "train.loss", "charbonnier");
    if (loss == "l2") c.loss = LossKind::l2;
    else if (loss == "charbonnier") c.loss = LossKind::charbonnier;
    else throw std::invalid_argument("unknown loss: " + loss);
    c.charbonnier_eps = detail::kv_double(kv, "train.charbonnier_eps", c.charbonnier_eps);
    return c;
}

inline void train_config_to(const TrainConfig& c, std::ostream& os) {
    os << "train.patch = " << c.patch << "\n"
       << "train.batch = " << c.batch << "\n"
       << "train.lr = " << c.lr << "\n"
       << "train.lr_halve_every = " << c.lr_halve_every << "\n"
       << "train.steps = " << c.steps << "\n"
       << "train.seed = " << c.seed << "\n"
       << "train.loss = " << (c.loss == LossKind::l2 ? "l2" : "charbonnier") << "\n"
       << "train.charbonnier_eps = " << c.charbonnier_eps << "\n";
}

inline SynthConfig synth_config_from(const KeyValues& kv) {
    SynthConfig c;
    c.seed = detail::kv_size(kv, "synth.seed", static_cast<std::size_t>(c.seed));
    c.F = detail::kv_size(kv, "synth.frames", c.F);
    c.H = detail::kv_size(kv, "synth.h", c.H);
    c.W = detail::kv_size(kv, "synth.w", c.W);
    c.num_objects = detail::kv_size(kv, "synth.objects", c.num_objects);
    c.vmax = detail::kv_double(kv, "synth.vmax", c.vmax);
    c.E = detail::kv_size(kv, "synth.exposure", c.E);
    return c;
}

}  // namespace fsta
