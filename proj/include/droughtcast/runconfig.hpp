#pragma once

// Sectioned key-value run configuration. Unknown sections or keys are
// rejected; flag overrides layer on top of the file (flag > file > default);
// the resolved configuration is serialized canonically and hashed so every
// output artifact can carry its provenance.

#include <array>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "droughtcast/evaluation.hpp"
#include "droughtcast/model.hpp"
#include "droughtcast/physics.hpp"
#include "droughtcast/pipeline.hpp"
#include "droughtcast/training.hpp"

namespace droughtcast {

struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct RunConfig {
    // [data]
    std::string raw_archive = "raw_archive";
    std::string processed_archive = "processed_archive";
    std::vector<int> train_years;
    std::vector<int> val_years;
    std::vector<int> test_years;
    bool coarsen = false;

    // [model]
    ModelConfig model;

    // [train]
    TrainConfig train;

    // [physics]
    ConstraintToggles physics;

    // [eval]
    std::vector<std::string> masks = {"africa", "global"};
    EvalOptions eval;

    // [synth]
    SynthSpec synth;
    int grid_nlat = 16;
    int grid_nlon = 32;

    std::uint64_t seed = 1;
    int threads = 1;

    DatasetSplit split() const {
        DatasetSplit s;
        s.train = train_years;
        s.val = val_years;
        s.test = test_years;
        s.validate();
        return s;
    }

    std::string canonical_text() const;
    std::string hash_hex() const {
        char buf[24];
        std::snprintf(buf, sizeof(buf), "%016llx",
                      static_cast<unsigned long long>(fnv1a64(canonical_text())));
        return buf;
    }
};

namespace detail_config {

inline std::string trim(const std::string& s) {
    std::size_t a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    std::size_t b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
}

inline std::vector<int> parse_years(const std::string& v) {
    std::vector<int> out;
    std::istringstream is(v);
    std::string part;
    while (std::getline(is, part, ',')) {
        part = trim(part);
        if (part.empty()) continue;
        auto dash = part.find('-');
        if (dash != std::string::npos && dash > 0) {
            const int a = std::stoi(part.substr(0, dash));
            const int b = std::stoi(part.substr(dash + 1));
            if (b < a) throw ConfigError("bad year range '" + part + "'");
            for (int y = a; y <= b; ++y) out.push_back(y);
        } else {
            out.push_back(std::stoi(part));
        }
    }
    return out;
}

inline std::vector<int> parse_int_list(const std::string& v) {
    std::vector<int> out;
    std::istringstream is(v);
    std::string part;
    while (std::getline(is, part, ',')) {
        part = trim(part);
        if (!part.empty()) out.push_back(std::stoi(part));
    }
    return out;
}

template <std::size_t N>
inline std::array<int, N> parse_int_array(const std::string& v, const std::string& key) {
    std::vector<int> list = parse_int_list(v);
    if (list.size() != N)
        throw ConfigError("key '" + key + "' expects " + std::to_string(N) + " comma-separated values");
    std::array<int, N> out{};
    std::copy(list.begin(), list.end(), out.begin());
    return out;
}

inline bool parse_bool(const std::string& v, const std::string& key) {
    if (v == "true" || v == "1" || v == "on") return true;
    if (v == "false" || v == "0" || v == "off") return false;
    throw ConfigError("key '" + key + "' expects a boolean, got '" + v + "'");
}

// year:2002,start:150,len:30,box:-10:10:0:40 [; more events]
inline std::vector<SynthEvent> parse_events(const std::string& v) {
    std::vector<SynthEvent> events;
    std::istringstream is(v);
    std::string ev_text;
    while (std::getline(is, ev_text, ';')) {
        ev_text = trim(ev_text);
        if (ev_text.empty()) continue;
        SynthEvent ev;
        std::istringstream es(ev_text);
        std::string field;
        while (std::getline(es, field, ',')) {
            field = trim(field);
            auto colon = field.find(':');
            if (colon == std::string::npos) throw ConfigError("bad event field '" + field + "'");
            const std::string k = field.substr(0, colon), val = field.substr(colon + 1);
            if (k == "year") ev.year = std::stoi(val);
            else if (k == "start") ev.start_doy = std::stoi(val);
            else if (k == "len") ev.length_days = std::stoi(val);
            else if (k == "box") {
                double a, b, c, d;
                if (std::sscanf(val.c_str(), "%lf:%lf:%lf:%lf", &a, &b, &c, &d) != 4)
                    throw ConfigError("event box expects lat0:lat1:lon0:lon1");
                ev.lat0 = a;
                ev.lat1 = b;
                ev.lon0 = c;
                ev.lon1 = d;
            } else {
                throw ConfigError("unknown event field '" + k + "'");
            }
        }
        events.push_back(ev);
    }
    return events;
}

}  // namespace detail_config

// Applies one key to the config; throws ConfigError for unknown keys.
inline void apply_config_key(RunConfig& cfg, const std::string& section, const std::string& key,
                             const std::string& value) {
    using namespace detail_config;
    const std::string full = section + "." + key;
    if (section == "data") {
        if (key == "raw_archive") cfg.raw_archive = value;
        else if (key == "processed_archive") cfg.processed_archive = value;
        else if (key == "train_years") cfg.train_years = parse_years(value);
        else if (key == "val_years") cfg.val_years = parse_years(value);
        else if (key == "test_years") cfg.test_years = parse_years(value);
        else if (key == "coarsen") cfg.coarsen = parse_bool(value, full);
        else if (key == "grid_nlat") cfg.grid_nlat = std::stoi(value);
        else if (key == "grid_nlon") cfg.grid_nlon = std::stoi(value);
        else throw ConfigError("unknown config key '" + full + "'");
    } else if (section == "model") {
        if (key == "block_dims") cfg.model.block_dims = parse_int_array<4>(value, full);
        else if (key == "heads") cfg.model.heads_per_block = parse_int_array<4>(value, full);
        else if (key == "depths") cfg.model.depths = parse_int_array<4>(value, full);
        else if (key == "sda_group") cfg.model.sda_group = std::stoi(value);
        else if (key == "lda_intervals") cfg.model.lda_intervals = parse_int_array<4>(value, full);
        else if (key == "embed_kernels_block1") cfg.model.embed_kernels_block1 = parse_int_list(value);
        else if (key == "embed_kernels_later") cfg.model.embed_kernels_later = parse_int_list(value);
        else if (key == "dropout") cfg.model.dropout = std::stod(value);
        else if (key == "spectral_norm") cfg.model.use_spectral_norm = parse_bool(value, full);
        else if (key == "upsample") cfg.model.upsample_method = upsample_from_name(value);
        else throw ConfigError("unknown config key '" + full + "'");
    } else if (section == "train") {
        if (key == "lr_max") cfg.train.lr_max = std::stod(value);
        else if (key == "lr_min") cfg.train.lr_min = std::stod(value);
        else if (key == "l2") cfg.train.l2 = std::stod(value);
        else if (key == "batch_size") cfg.train.batch_size = std::stoi(value);
        else if (key == "single_step_epochs") cfg.train.single_step_epochs = std::stoi(value);
        else if (key == "multistep_epochs") cfg.train.multistep_epochs = std::stoi(value);
        else if (key == "rollout_steps") cfg.train.rollout_steps = std::stoi(value);
        else if (key == "beta1") cfg.train.beta1 = std::stod(value);
        else if (key == "beta2") cfg.train.beta2 = std::stod(value);
        else if (key == "eps") cfg.train.eps = std::stod(value);
        else if (key == "early_stop_patience") cfg.train.early_stop_patience = std::stoi(value);
        else throw ConfigError("unknown config key '" + full + "'");
    } else if (section == "physics") {
        if (key == "clamp") cfg.physics.clamp = parse_bool(value, full);
        else if (key == "moisture") cfg.physics.moisture = parse_bool(value, full);
        else if (key == "dry_mass") cfg.physics.dry_mass = parse_bool(value, full);
        else if (key == "r_max") cfg.physics.r_max = std::stod(value);
        else throw ConfigError("unknown config key '" + full + "'");
    } else if (section == "eval") {
        if (key == "masks") {
            cfg.masks.clear();
            std::istringstream is(value);
            std::string m;
            while (std::getline(is, m, ',')) {
                m = trim(m);
                if (m != "africa" && m != "global") throw ConfigError("unknown mask '" + m + "'");
                cfg.masks.push_back(m);
            }
        } else if (key == "max_lead") cfg.eval.max_lead = std::stoi(value);
        else if (key == "init_stride") cfg.eval.init_stride = std::stoi(value);
        else if (key == "anomaly_leads_every") cfg.eval.anomaly_leads_every = std::stoi(value);
        else throw ConfigError("unknown config key '" + full + "'");
    } else if (section == "synth") {
        if (key == "years") cfg.synth.years = parse_years(value);
        else if (key == "noise") cfg.synth.noise_scale = std::stod(value);
        else if (key == "ar1") cfg.synth.ar1_coef = std::stod(value);
        else if (key == "esr_ar1") cfg.synth.esr_ar1_coef = std::stod(value);
        else if (key == "veg_obs_period") cfg.synth.veg_obs_period = std::stoi(value);
        else if (key == "events") cfg.synth.events = parse_events(value);
        else throw ConfigError("unknown config key '" + full + "'");
    } else {
        throw ConfigError("unknown config section '[" + section + "]'");
    }
}

inline RunConfig parse_runconfig(std::istream& in, const std::vector<std::string>& overrides = {}) {
    RunConfig cfg;
    {
        DatasetSplit s = DatasetSplit::standard();
        cfg.train_years = s.train;
        cfg.val_years = s.val;
        cfg.test_years = s.test;
        cfg.synth.years.clear();
        for (int y = 2001; y <= 2024; ++y) cfg.synth.years.push_back(y);
    }
    std::string line, section;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        std::string t = detail_config::trim(line);
        if (t.empty() || t[0] == '#' || t[0] == ';') continue;
        if (t.front() == '[') {
            if (t.back() != ']') throw ConfigError("bad section header at line " + std::to_string(lineno));
            section = t.substr(1, t.size() - 2);
            continue;
        }
        auto eq = t.find('=');
        if (eq == std::string::npos)
            throw ConfigError("expected key = value at line " + std::to_string(lineno));
        const std::string key = detail_config::trim(t.substr(0, eq));
        const std::string value = detail_config::trim(t.substr(eq + 1));
        if (section.empty()) throw ConfigError("key '" + key + "' outside any section");
        apply_config_key(cfg, section, key, value);
    }
    for (const auto& ov : overrides) {
        auto eq = ov.find('=');
        auto dot = ov.find('.');
        if (eq == std::string::npos || dot == std::string::npos || dot > eq)
            throw ConfigError("override must be section.key=value, got '" + ov + "'");
        apply_config_key(cfg, ov.substr(0, dot), ov.substr(dot + 1, eq - dot - 1),
                         detail_config::trim(ov.substr(eq + 1)));
    }
    cfg.model.validate();
    cfg.train.validate();
    return cfg;
}

inline RunConfig parse_runconfig_file(const std::filesystem::path& path,
                                      const std::vector<std::string>& overrides = {}) {
    std::ifstream f(path);
    if (!f) throw ConfigError("cannot open config file " + path.string());
    return parse_runconfig(f, overrides);
}

inline std::string RunConfig::canonical_text() const {
    std::ostringstream os;
    auto years = [&](const std::vector<int>& ys) {
        for (std::size_t i = 0; i < ys.size(); ++i) os << (i ? "," : "") << ys[i];
        os << "\n";
    };
    os << "[data]\n";
    os << "raw_archive=" << raw_archive << "\n";
    os << "processed_archive=" << processed_archive << "\n";
    os << "train_years=";
    years(train_years);
    os << "val_years=";
    years(val_years);
    os << "test_years=";
    years(test_years);
    os << "coarsen=" << coarsen << "\n";
    os << "grid_nlat=" << grid_nlat << "\ngrid_nlon=" << grid_nlon << "\n";
    os << "[model]\n" << model.to_text();
    os << "[train]\n";
    os << "lr_max=" << grd1::fmt_g17(train.lr_max) << "\nlr_min=" << grd1::fmt_g17(train.lr_min)
       << "\nl2=" << grd1::fmt_g17(train.l2) << "\nbatch_size=" << train.batch_size
       << "\nsingle_step_epochs=" << train.single_step_epochs
       << "\nmultistep_epochs=" << train.multistep_epochs << "\nrollout_steps=" << train.rollout_steps
       << "\nbeta1=" << grd1::fmt_g17(train.beta1) << "\nbeta2=" << grd1::fmt_g17(train.beta2)
       << "\neps=" << grd1::fmt_g17(train.eps) << "\nearly_stop_patience=" << train.early_stop_patience
       << "\n";
    os << "[physics]\n";
    os << "clamp=" << physics.clamp << "\nmoisture=" << physics.moisture
       << "\ndry_mass=" << physics.dry_mass << "\nr_max=" << grd1::fmt_g17(physics.r_max) << "\n";
    os << "[eval]\nmasks=";
    for (std::size_t i = 0; i < masks.size(); ++i) os << (i ? "," : "") << masks[i];
    os << "\nmax_lead=" << eval.max_lead << "\ninit_stride=" << eval.init_stride << "\n";
    os << "[synth]\nyears=";
    years(synth.years);
    os << "noise=" << grd1::fmt_g17(synth.noise_scale) << "\nar1=" << grd1::fmt_g17(synth.ar1_coef)
       << "\nesr_ar1=" << grd1::fmt_g17(synth.esr_ar1_coef) << "\nveg_obs_period=" << synth.veg_obs_period
       << "\nevents=";
    for (std::size_t i = 0; i < synth.events.size(); ++i) os << (i ? ";" : "") << synth.events[i].to_text();
    os << "\nseed=" << seed << "\n";
    return os.str();
}

}  // namespace droughtcast
