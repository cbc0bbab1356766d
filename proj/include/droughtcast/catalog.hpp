#pragma once

// Variable roster for the emulator: 25 input channels, 23 output channels.
// Channel order within each stack is the catalog's listing order.

#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "droughtcast/rng.hpp"

namespace droughtcast {

enum class VarRole { prognostic, dynamic_forcing, cyclic_forcing, static_field, diagnostic };

inline const char* role_name(VarRole r) {
    switch (r) {
        case VarRole::prognostic: return "prognostic";
        case VarRole::dynamic_forcing: return "dynamic_forcing";
        case VarRole::cyclic_forcing: return "cyclic_forcing";
        case VarRole::static_field: return "static";
        case VarRole::diagnostic: return "diagnostic";
    }
    return "?";
}

inline VarRole role_from_name(const std::string& s) {
    if (s == "prognostic") return VarRole::prognostic;
    if (s == "dynamic_forcing") return VarRole::dynamic_forcing;
    if (s == "cyclic_forcing") return VarRole::cyclic_forcing;
    if (s == "static") return VarRole::static_field;
    if (s == "diagnostic") return VarRole::diagnostic;
    throw std::invalid_argument("unknown variable role '" + s + "'");
}

struct VariableDef {
    std::string name;
    VarRole role = VarRole::prognostic;
    std::string units;
    std::string level_tag;    // surface | 500mb | 200mb | soil1..soil4
    bool nonneg = false;      // clamped to >= 0 after prediction
    bool categorical = false; // passes through normalization unscaled
    bool scalar_series = false;  // spatially constant (climate index)
    int input_index = -1;     // position in the 25-channel input stack, or -1
    int output_index = -1;    // position in the 23-channel output stack, or -1
};

class VariableCatalog {
  public:
    // The standard roster. Upper-air variables carry one channel per level
    // (500 mb first, then 200 mb). q_tot = specific humidity + cloud liquid
    // + cloud ice at that level.
    static VariableCatalog standard() {
        VariableCatalog c;
        auto prog = [&](const std::string& n, const std::string& u, const std::string& lv,
                        bool nn = false) { c.push({n, VarRole::prognostic, u, lv, nn}); };
        prog("u500", "m s-1", "500mb");
        prog("u200", "m s-1", "200mb");
        prog("v500", "m s-1", "500mb");
        prog("v200", "m s-1", "200mb");
        prog("z500", "m2 s-2", "500mb");
        prog("z200", "m2 s-2", "200mb");
        prog("qtot500", "kg kg-1", "500mb");
        prog("qtot200", "kg kg-1", "200mb");
        prog("t2m", "K", "surface");
        prog("td2m", "K", "surface");
        prog("precip1d", "mm", "surface", true);
        prog("sp", "Pa", "surface");
        prog("evap", "mm day-1", "surface", true);
        prog("pet", "mm day-1", "surface", true);

        auto dyn = [&](const std::string& n, const std::string& u, bool scalar = false) {
            VariableDef d{n, VarRole::dynamic_forcing, u, "surface"};
            d.scalar_series = scalar;
            c.push(d);
        };
        dyn("enso", "1", true);
        dyn("iod", "1", true);
        dyn("swrad", "W m-2");
        dyn("wspd", "m s-1");
        dyn("wgust", "m s-1");

        c.push({"swrad_clim", VarRole::cyclic_forcing, "W m-2", "surface"});

        auto stat = [&](const std::string& n, bool cat) {
            VariableDef d{n, VarRole::static_field, "1", "surface"};
            d.categorical = cat;
            c.push(d);
        };
        stat("lsm", true);
        stat("hveg_type", true);
        stat("hveg_cover", false);
        stat("lveg_type", true);
        stat("lveg_cover", false);

        auto diag = [&](const std::string& n, const std::string& u, const std::string& lv) {
            c.push({n, VarRole::diagnostic, u, lv, true});
        };
        diag("precip30d", "mm", "surface");
        diag("ndvi", "1", "surface");
        diag("evi", "1", "surface");
        diag("lai", "1", "surface");
        diag("fpar", "1", "surface");
        diag("sm1", "kg m-2", "soil1");
        diag("sm2", "kg m-2", "soil2");
        diag("sm3", "kg m-2", "soil3");
        diag("sm4", "kg m-2", "soil4");

        c.finalize();
        return c;
    }

    void push(VariableDef def) { defs_.push_back(std::move(def)); }

    // Assigns contiguous input/output channel indices in listing order.
    void finalize() {
        int in = 0, out = 0;
        by_name_.clear();
        for (auto& d : defs_) {
            d.input_index = -1;
            d.output_index = -1;
            if (d.role == VarRole::prognostic || d.role == VarRole::dynamic_forcing ||
                d.role == VarRole::cyclic_forcing || d.role == VarRole::static_field)
                d.input_index = in++;
            if (d.role == VarRole::prognostic || d.role == VarRole::diagnostic)
                d.output_index = out++;
            if (!by_name_.emplace(d.name, &d).second)
                throw std::invalid_argument("duplicate variable '" + d.name + "'");
        }
        n_inputs_ = in;
        n_outputs_ = out;
    }

    int n_inputs() const { return n_inputs_; }
    int n_outputs() const { return n_outputs_; }
    const std::vector<VariableDef>& all() const { return defs_; }

    const VariableDef& get(const std::string& name) const {
        auto it = by_name_.find(name);
        if (it == by_name_.end()) throw std::invalid_argument("unknown variable '" + name + "'");
        return *it->second;
    }
    bool has(const std::string& name) const { return by_name_.count(name) != 0; }

    // Variables in input-channel order / output-channel order.
    std::vector<const VariableDef*> inputs() const {
        std::vector<const VariableDef*> v(static_cast<std::size_t>(n_inputs_));
        for (const auto& d : defs_)
            if (d.input_index >= 0) v[static_cast<std::size_t>(d.input_index)] = &d;
        return v;
    }
    std::vector<const VariableDef*> outputs() const {
        std::vector<const VariableDef*> v(static_cast<std::size_t>(n_outputs_));
        for (const auto& d : defs_)
            if (d.output_index >= 0) v[static_cast<std::size_t>(d.output_index)] = &d;
        return v;
    }

    // Per-output-channel non-negativity flags for the post-prediction clamp.
    std::vector<bool> output_nonneg_flags() const {
        std::vector<bool> f(static_cast<std::size_t>(n_outputs_), false);
        for (const auto& d : defs_)
            if (d.output_index >= 0) f[static_cast<std::size_t>(d.output_index)] = d.nonneg;
        return f;
    }

    int output_channel(const std::string& name) const {
        int i = get(name).output_index;
        if (i < 0) throw std::invalid_argument("variable '" + name + "' is not an output");
        return i;
    }
    int input_channel(const std::string& name) const {
        int i = get(name).input_index;
        if (i < 0) throw std::invalid_argument("variable '" + name + "' is not an input");
        return i;
    }

    std::string canonical_text() const {
        std::string s;
        for (const auto& d : defs_) {
            s += d.name;
            s += '|';
            s += role_name(d.role);
            s += '|';
            s += d.units;
            s += '|';
            s += d.level_tag;
            s += '|';
            s += d.nonneg ? '1' : '0';
            s += d.categorical ? '1' : '0';
            s += d.scalar_series ? '1' : '0';
            s += '\n';
        }
        return s;
    }

    std::uint64_t hash() const { return fnv1a64(canonical_text()); }

  private:
    std::vector<VariableDef> defs_;
    std::map<std::string, VariableDef*> by_name_;
    int n_inputs_ = 0;
    int n_outputs_ = 0;
};

}  // namespace droughtcast
