#pragma once

// Data pipeline: gap filling, running accumulations, coarsening, climatology
// construction, normalization statistics, input/target assembly, the dataset
// split, and the synthetic archive generator used by the desk-scale tests.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "droughtcast/archive.hpp"
#include "droughtcast/catalog.hpp"
#include "droughtcast/date.hpp"
#include "droughtcast/grid.hpp"
#include "droughtcast/rng.hpp"
#include "droughtcast/tensor.hpp"

namespace droughtcast {

// ---------------------------------------------------------------------------
// Series preprocessing
// ---------------------------------------------------------------------------

// Forward fill: each day carries the most recent prior (or same-day)
// observation; days before the first observation stay missing.
inline std::vector<double> gap_fill_forward(const std::vector<double>& sparse) {
    if (sparse.empty()) throw std::invalid_argument("gap_fill_forward: empty series");
    std::vector<double> out(sparse.size(), kFillValue);
    double last = kFillValue;
    for (std::size_t i = 0; i < sparse.size(); ++i) {
        if (!is_missing(sparse[i])) last = sparse[i];
        out[i] = last;
    }
    return out;
}

// Centered 30-day-equivalent accumulation. The window spans offsets
// [-15, +15] with half weight on both end samples (total weight 30), which
// keeps the accumulation symmetric around t; truncated windows at the series
// edges are rescaled to a 30-day-equivalent total.
inline std::vector<double> running_accumulation_30(const std::vector<double>& daily) {
    const std::int64_t n = static_cast<std::int64_t>(daily.size());
    if (n < 2) throw std::invalid_argument("running_accumulation_30: series shorter than 2 days");
    std::vector<double> out(daily.size());
    for (std::int64_t t = 0; t < n; ++t) {
        double acc = 0.0, wsum = 0.0;
        for (std::int64_t o = -15; o <= 15; ++o) {
            const std::int64_t i = t + o;
            if (i < 0 || i >= n) continue;
            const double w = (o == -15 || o == 15) ? 0.5 : 1.0;
            acc += w * daily[static_cast<std::size_t>(i)];
            wsum += w;
        }
        out[static_cast<std::size_t>(t)] = 30.0 * acc / wsum;
    }
    return out;
}

// 4x block coarsening with cosine-latitude weights. Missing fine cells are
// excluded from the weight sum; an all-missing block stays missing.
inline std::vector<double> coarsen_4x(const std::vector<double>& fine, int fine_nlat, int fine_nlon,
                                      const std::vector<double>& fine_lat) {
    if (fine_nlat % 4 != 0 || fine_nlon % 4 != 0)
        throw std::invalid_argument("coarsen_4x: extents not divisible by 4");
    if (fine.size() != static_cast<std::size_t>(fine_nlat) * fine_nlon ||
        fine_lat.size() != static_cast<std::size_t>(fine_nlat))
        throw std::invalid_argument("coarsen_4x: size mismatch");
    const int clat = fine_nlat / 4, clon = fine_nlon / 4;
    std::vector<double> out(static_cast<std::size_t>(clat) * clon, kFillValue);
    for (int ci = 0; ci < clat; ++ci)
        for (int cj = 0; cj < clon; ++cj) {
            double acc = 0.0, wsum = 0.0;
            for (int di = 0; di < 4; ++di)
                for (int dj = 0; dj < 4; ++dj) {
                    const int fi = 4 * ci + di, fj = 4 * cj + dj;
                    const double v = fine[static_cast<std::size_t>(fi) * fine_nlon + fj];
                    if (is_missing(v)) continue;
                    const double w = std::cos(fine_lat[static_cast<std::size_t>(fi)] * M_PI / 180.0);
                    acc += w * v;
                    wsum += w;
                }
            if (wsum > 0.0) out[static_cast<std::size_t>(ci) * clon + cj] = acc / wsum;
        }
    return out;
}

// ---------------------------------------------------------------------------
// Climatology
// ---------------------------------------------------------------------------

// Per-cell, per-day-of-year mean and pooled standard deviation. Means are
// exact day-of-year averages; the std pools squared anomalies (sample minus
// its own slot mean) over a +/- halfwidth window on the 365-day ring, which
// stabilizes the estimate when only a couple of decades of samples exist.
// Slot 366 (Feb 29) is filled from the Feb 28 / Mar 1 average.
struct ClimatologyTable {
    int n_lat = 0, n_lon = 0;
    int pool_halfwidth = 15;
    std::vector<float> mean;  // [366, cells]
    std::vector<float> stdd;  // [366, cells]

    std::size_t cells() const { return static_cast<std::size_t>(n_lat) * n_lon; }
    double mean_at(int slot, std::size_t cell) const { return mean[static_cast<std::size_t>(slot - 1) * cells() + cell]; }
    double std_at(int slot, std::size_t cell) const { return stdd[static_cast<std::size_t>(slot - 1) * cells() + cell]; }
};

inline ClimatologyTable build_climatology(const Archive& ar, const std::string& var,
                                          const std::vector<int>& years, int pool_halfwidth = 15) {
    if (years.empty()) throw std::invalid_argument("build_climatology: no years");
    const GridSpec& g = ar.grid();
    const std::size_t cells = g.cells();
    std::vector<double> sum(365 * cells, 0.0);
    std::vector<std::int32_t> cnt(365 * cells, 0);

    // Pass 1: exact per-slot means.
    for (int y : years) {
        const auto cube = ar.cube(var, y);
        const int days = days_in_year(y);
        for (int d = 0; d < days; ++d) {
            const Date date = add_days(Date{y, 1, 1}, d);
            if (date.month == 2 && date.day == 29) continue;  // slot 366 filled later
            const std::size_t s = static_cast<std::size_t>(climatology_slot(date) - 1);
            const float* p = cube->data() + static_cast<std::size_t>(d) * cells;
            for (std::size_t c = 0; c < cells; ++c) {
                if (is_missing(p[c])) continue;
                sum[s * cells + c] += p[c];
                cnt[s * cells + c] += 1;
            }
        }
    }
    std::vector<double> mean365(365 * cells, kFillValue);
    for (std::size_t i = 0; i < mean365.size(); ++i)
        if (cnt[i] > 0) mean365[i] = sum[i] / cnt[i];

    // Pass 2: squared anomalies pooled over the ring window.
    std::vector<double> sq(365 * cells, 0.0);
    std::vector<std::int32_t> sqc(365 * cells, 0);
    for (int y : years) {
        const auto cube = ar.cube(var, y);
        const int days = days_in_year(y);
        for (int d = 0; d < days; ++d) {
            const Date date = add_days(Date{y, 1, 1}, d);
            const int ring = ring_position(date);
            // Own slot for the anomaly: Feb 29 uses the Feb 28 mean.
            const std::size_t own = static_cast<std::size_t>(ring - 1);
            const float* p = cube->data() + static_cast<std::size_t>(d) * cells;
            for (int off = -pool_halfwidth; off <= pool_halfwidth; ++off) {
                int slot = ring + off;
                if (slot < 1) slot += 365;
                if (slot > 365) slot -= 365;
                const std::size_t si = static_cast<std::size_t>(slot - 1);
                for (std::size_t c = 0; c < cells; ++c) {
                    if (is_missing(p[c]) || is_missing(mean365[own * cells + c])) continue;
                    const double dev = p[c] - mean365[own * cells + c];
                    sq[si * cells + c] += dev * dev;
                    sqc[si * cells + c] += 1;
                }
            }
        }
    }

    ClimatologyTable t;
    t.n_lat = g.n_lat;
    t.n_lon = g.n_lon;
    t.pool_halfwidth = pool_halfwidth;
    t.mean.assign(366 * cells, kFillValue);
    t.stdd.assign(366 * cells, kFillValue);
    for (std::size_t i = 0; i < mean365.size(); ++i) {
        if (!is_missing(mean365[i])) t.mean[i] = static_cast<float>(mean365[i]);
        if (sqc[i] > 0) t.stdd[i] = static_cast<float>(std::sqrt(sq[i] / sqc[i]));
    }
    // Leap-day slot from the neighbors.
    const std::size_t feb28 = static_cast<std::size_t>(climatology_slot(Date{2001, 2, 28}) - 1);
    const std::size_t mar1 = static_cast<std::size_t>(climatology_slot(Date{2001, 3, 1}) - 1);
    for (std::size_t c = 0; c < cells; ++c) {
        const float m1 = t.mean[feb28 * cells + c], m2 = t.mean[mar1 * cells + c];
        const float s1 = t.stdd[feb28 * cells + c], s2 = t.stdd[mar1 * cells + c];
        if (!is_missing(m1) && !is_missing(m2)) t.mean[365 * cells + c] = 0.5f * (m1 + m2);
        if (!is_missing(s1) && !is_missing(s2)) t.stdd[365 * cells + c] = 0.5f * (s1 + s2);
    }
    return t;
}

// Day-of-year mean cycle over the training years (the mean half of the
// climatology; used for cyclic forcing channels).
inline std::vector<float> build_cyclic_forcing(const Archive& ar, const std::string& var,
                                               const std::vector<int>& years) {
    return build_climatology(ar, var, years).mean;
}

// ---------------------------------------------------------------------------
// Dataset split
// ---------------------------------------------------------------------------

struct DatasetSplit {
    std::vector<int> train, val, test;

    static DatasetSplit standard() {
        DatasetSplit s;
        for (int y = 2001; y <= 2017; ++y) s.train.push_back(y);
        for (int y = 2022; y <= 2024; ++y) s.train.push_back(y);
        s.val = {2018, 2019};
        s.test = {2020, 2021};
        return s;
    }

    void validate() const {
        if (train.empty()) throw std::invalid_argument("split: empty training set");
        std::set<int> seen;
        for (const auto* part : {&train, &val, &test})
            for (int y : *part)
                if (!seen.insert(y).second)
                    throw std::invalid_argument("split: year " + std::to_string(y) + " appears twice");
    }
};

// ---------------------------------------------------------------------------
// Normalization
// ---------------------------------------------------------------------------

// Training-period z-score statistics per variable. Cube variables pool over
// all training days and cells; scalar series pool over training dates; static
// fields pool over cells (their temporal variance is zero); categorical
// statics pass through unscaled. A vanished std falls back to 1.
inline std::map<std::string, std::pair<double, double>> compute_norm_stats(
    const Archive& ar, const VariableCatalog& catalog, const std::vector<int>& train_years) {
    std::map<std::string, std::pair<double, double>> stats;
    const std::size_t cells = ar.grid().cells();
    for (const auto& def : catalog.all()) {
        double s1 = 0.0, s2 = 0.0;
        std::int64_t n = 0;
        if (def.categorical) {
            stats[def.name] = {0.0, 1.0};
            continue;
        }
        if (def.scalar_series) {
            for (int y : train_years) {
                const Date start{y, 1, 1};
                for (int d = 0; d < days_in_year(y); ++d) {
                    const double v = ar.scalar_index(def.name, add_days(start, d));
                    s1 += v;
                    s2 += v * v;
                    ++n;
                }
            }
        } else if (def.role == VarRole::static_field) {
            const auto f = ar.static_field(def.name);
            for (float v : *f) {
                if (is_missing(v)) continue;
                s1 += v;
                s2 += static_cast<double>(v) * v;
                ++n;
            }
        } else if (def.role == VarRole::cyclic_forcing) {
            const auto f = ar.cycle(def.name);
            for (float v : *f) {
                if (is_missing(v)) continue;
                s1 += v;
                s2 += static_cast<double>(v) * v;
                ++n;
            }
        } else {
            for (int y : train_years) {
                const auto cube = ar.cube(def.name, y);
                for (float v : *cube) {
                    if (is_missing(v)) continue;
                    s1 += v;
                    s2 += static_cast<double>(v) * v;
                    ++n;
                }
            }
            (void)cells;
        }
        if (n == 0) throw std::runtime_error("normalization: no samples for " + def.name);
        const double mean = s1 / static_cast<double>(n);
        double var = s2 / static_cast<double>(n) - mean * mean;
        if (var < 0.0) var = 0.0;
        double sd = std::sqrt(var);
        if (sd < 1e-12) sd = 1.0;
        stats[def.name] = {mean, sd};
    }
    return stats;
}

// Applies the per-channel z-score maps. Categorical channels carry mean 0,
// std 1 in the stats, so they pass through unchanged by construction.
struct Normalizer {
    std::vector<double> in_mean, in_std;    // per input channel
    std::vector<double> out_mean, out_std;  // per output channel

    static Normalizer from_stats(const std::map<std::string, std::pair<double, double>>& stats,
                                 const VariableCatalog& catalog) {
        Normalizer nm;
        for (const auto* def : catalog.inputs()) {
            auto it = stats.find(def->name);
            if (it == stats.end()) throw std::invalid_argument("normalizer: missing stats for " + def->name);
            nm.in_mean.push_back(it->second.first);
            nm.in_std.push_back(it->second.second);
        }
        for (const auto* def : catalog.outputs()) {
            auto it = stats.find(def->name);
            if (it == stats.end()) throw std::invalid_argument("normalizer: missing stats for " + def->name);
            nm.out_mean.push_back(it->second.first);
            nm.out_std.push_back(it->second.second);
        }
        return nm;
    }

    Tensor normalize_input(const Tensor& x) const { return apply(x, in_mean, in_std, false); }
    Tensor normalize_output(const Tensor& x) const { return apply(x, out_mean, out_std, false); }
    Tensor denormalize_output(const Tensor& x) const { return apply(x, out_mean, out_std, true); }

  private:
    static Tensor apply(const Tensor& x, const std::vector<double>& mean, const std::vector<double>& sd,
                        bool inverse) {
        if (x.dim(0) != static_cast<int>(mean.size()))
            throw std::invalid_argument("normalizer: channel count mismatch");
        std::vector<double> s(mean.size()), o(mean.size());
        for (std::size_t c = 0; c < mean.size(); ++c) {
            if (inverse) {
                s[c] = sd[c];
                o[c] = mean[c];
            } else {
                s[c] = 1.0 / sd[c];
                o[c] = -mean[c] / sd[c];
            }
        }
        return channel_affine(x, s, o);
    }
};

// ---------------------------------------------------------------------------
// State assembly
// ---------------------------------------------------------------------------

namespace detail_pipeline {

inline void append_field(std::vector<double>& out, const std::vector<double>& f, const std::string& var,
                         const Date& date) {
    for (double v : f)
        if (is_missing(v))
            throw std::runtime_error("assemble: missing data in " + var + " at " + format_date(date));
    out.insert(out.end(), f.begin(), f.end());
}

}  // namespace detail_pipeline

// Physical-units input state [n_inputs, H, W] for one date: prognostic and
// dynamic fields from the date's analysis, cyclic forcing indexed by
// day-of-year, static channels, and scalar climate indices broadcast as
// constant fields.
inline Tensor assemble_input(const Archive& ar, const Date& date, const VariableCatalog& catalog) {
    const GridSpec& g = ar.grid();
    const std::size_t cells = g.cells();
    std::vector<double> stack;
    stack.reserve(static_cast<std::size_t>(catalog.n_inputs()) * cells);
    for (const auto* def : catalog.inputs()) {
        if (def->scalar_series) {
            stack.insert(stack.end(), cells, ar.scalar_index(def->name, date));
        } else if (def->role == VarRole::static_field) {
            const auto f = ar.static_field(def->name);
            std::vector<double> d(f->begin(), f->end());
            detail_pipeline::append_field(stack, d, def->name, date);
        } else if (def->role == VarRole::cyclic_forcing) {
            const auto f = ar.cycle(def->name);
            const int slot = climatology_slot(date);
            std::vector<double> d(f->begin() + static_cast<std::ptrdiff_t>((slot - 1) * cells),
                                  f->begin() + static_cast<std::ptrdiff_t>(slot * cells));
            detail_pipeline::append_field(stack, d, def->name, date);
        } else {
            detail_pipeline::append_field(stack, ar.field(def->name, date), def->name, date);
        }
    }
    return Tensor::from({catalog.n_inputs(), g.n_lat, g.n_lon}, std::move(stack));
}

// Physical-units output stack [n_outputs, H, W] for one date.
inline Tensor assemble_target(const Archive& ar, const Date& date, const VariableCatalog& catalog) {
    const GridSpec& g = ar.grid();
    std::vector<double> stack;
    stack.reserve(static_cast<std::size_t>(catalog.n_outputs()) * g.cells());
    for (const auto* def : catalog.outputs())
        detail_pipeline::append_field(stack, ar.field(def->name, date), def->name, date);
    return Tensor::from({catalog.n_outputs(), g.n_lat, g.n_lon}, std::move(stack));
}

// Forcing-only channels (dynamic + cyclic + static) for one date, in input
// stack order with the prognostic block omitted.
inline Tensor assemble_forcings(const Archive& ar, const Date& date, const VariableCatalog& catalog) {
    Tensor full = assemble_input(ar, date, catalog);
    int n_prog = 0;
    for (const auto* def : catalog.inputs())
        if (def->role == VarRole::prognostic) ++n_prog;
    return slice_channels(full, n_prog, catalog.n_inputs());
}

// Next-step input from a (constrained, physical) prediction plus the next
// date's forcings; differentiable through the prognostic channels.
inline Tensor advance_state(const Tensor& pred_output, const Tensor& forcings,
                            const VariableCatalog& catalog) {
    int n_prog = 0;
    for (const auto* def : catalog.inputs())
        if (def->role == VarRole::prognostic) ++n_prog;
    return concat_channels({slice_channels(pred_output, 0, n_prog), forcings});
}

// Per-variable fields recovered from an assembled stack (inverse bookkeeping).
inline std::map<std::string, std::vector<double>> disassemble_input(const Tensor& state,
                                                                    const VariableCatalog& catalog) {
    std::map<std::string, std::vector<double>> out;
    const std::size_t per = state.numel() / static_cast<std::size_t>(state.dim(0));
    for (const auto* def : catalog.inputs()) {
        const std::size_t off = static_cast<std::size_t>(def->input_index) * per;
        out[def->name] = std::vector<double>(state.values().begin() + static_cast<std::ptrdiff_t>(off),
                                             state.values().begin() + static_cast<std::ptrdiff_t>(off + per));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Synthetic archive generator
// ---------------------------------------------------------------------------

struct SynthEvent {
    int year = 0;
    int start_doy = 150;   // 1-based ordinal day
    int length_days = 30;  // drawdown ramp + hold
    double lat0 = -10, lat1 = 10, lon0 = 0, lon1 = 40;

    std::string to_text() const {
        char buf[160];
        std::snprintf(buf, sizeof(buf), "year:%d,start:%d,len:%d,box:%g:%g:%g:%g", year, start_doy,
                      length_days, lat0, lat1, lon0, lon1);
        return buf;
    }
};

struct SynthSpec {
    std::vector<int> years;       // contiguous
    double noise_scale = 1.0;
    double ar1_coef = 0.8;
    double esr_ar1_coef = 0.15;   // evaporative-stress driver decorrelates fast
    int veg_obs_period = 8;       // observation cadence before gap filling
    std::vector<SynthEvent> events;
};

namespace detail_synth {

struct VarParams {
    double base = 0.0;
    double static_amp = 0.0;    // time-invariant spatial offset
    double seasonal_amp = 0.0;  // spatially modulated seasonal cycle
    double inter_amp = 0.0;     // per-year offset (scaled by noise)
    double daily_amp = 0.0;     // AR(1) daily noise (scaled by noise)
    double min_value = -1e30;
    double max_value = 1e30;
};

// Smooth low-order harmonic field in roughly [-1, 1].
inline std::vector<double> harmonic_pattern(int nlat, int nlon, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> uni(0.0, 2.0 * M_PI);
    std::uniform_int_distribution<int> wave(1, 2);
    std::vector<double> f(static_cast<std::size_t>(nlat) * nlon, 0.0);
    double norm = 0.0;
    for (int k = 0; k < 3; ++k) {
        const double amp = 1.0 / (1 + k);
        const int py = wave(rng), px = wave(rng);
        const double phy = uni(rng), phx = uni(rng);
        norm += amp;
        for (int i = 0; i < nlat; ++i)
            for (int j = 0; j < nlon; ++j)
                f[static_cast<std::size_t>(i) * nlon + j] +=
                    amp * std::sin(2.0 * M_PI * py * i / nlat + phy) *
                    std::cos(2.0 * M_PI * px * j / nlon + phx);
    }
    for (auto& v : f) v /= norm;
    return f;
}

}  // namespace detail_synth

class SynthGenerator {
  public:
    SynthGenerator(GridSpec grid, SynthSpec spec, std::uint64_t seed, VariableCatalog catalog)
        : grid_(std::move(grid)), spec_(std::move(spec)), seed_(seed), catalog_(std::move(catalog)) {
        if (spec_.years.empty()) throw std::invalid_argument("synth: no years");
        for (std::size_t i = 1; i < spec_.years.size(); ++i)
            if (spec_.years[i] != spec_.years[i - 1] + 1)
                throw std::invalid_argument("synth: years must be contiguous");
    }

    // Generates the raw archive: daily cubes for prognostic/dynamic/diagnostic
    // variables (vegetation indices at the observation cadence with gaps),
    // static fields, and scalar index series. precip30d and the cyclic forcing
    // channel are derived later by preprocessing.
    Archive generate(const std::filesystem::path& dir, Provenance prov) const {
        prov.stage = "raw";
        prov.seed = seed_;
        Archive ar = Archive::create(dir, grid_, spec_.years, catalog_, prov);
        const std::size_t cells = grid_.cells();

        write_statics(ar);
        write_scalar_series(ar);

        // Event envelope per (day, cell), shared by the linked variables.
        const std::vector<int>& years = spec_.years;
        std::int64_t total_days = 0;
        for (int y : years) total_days += days_in_year(y);
        std::vector<double> event_env(static_cast<std::size_t>(total_days) * cells, 0.0);
        std::vector<double> prime_env(static_cast<std::size_t>(total_days) * cells, 0.0);
        build_event_envelope(event_env, prime_env, total_days);

        // Generate the full series for every cube variable, then write per year.
        std::map<std::string, std::vector<double>> series;
        auto gen_plain = [&](const std::string& var, const detail_synth::VarParams& p, double ar1) {
            series[var] = generate_series(var, p, total_days, ar1);
        };
        using VP = detail_synth::VarParams;
        gen_plain("u500", VP{5, 3, 4, 0.4, 1.5}, spec_.ar1_coef);
        gen_plain("u200", VP{10, 4, 6, 0.5, 2.0}, spec_.ar1_coef);
        gen_plain("v500", VP{0, 2, 3, 0.3, 1.2}, spec_.ar1_coef);
        gen_plain("v200", VP{0, 3, 4, 0.4, 1.5}, spec_.ar1_coef);
        gen_plain("z500", VP{55000, 300, 400, 40, 80}, spec_.ar1_coef);
        gen_plain("z200", VP{115000, 400, 600, 50, 100}, spec_.ar1_coef);
        gen_plain("qtot500", VP{4e-3, 5e-4, 8e-4, 2e-5, 4e-5, 1e-5}, spec_.ar1_coef);
        gen_plain("qtot200", VP{1.5e-3, 2e-4, 3e-4, 1e-5, 2e-5, 1e-6}, spec_.ar1_coef);
        gen_plain("t2m", VP{288, 8, 7, 0.5, 1.0}, spec_.ar1_coef);
        gen_plain("td2m", VP{283, 7, 6, 0.5, 1.0}, spec_.ar1_coef);
        gen_plain("sp", VP{96000, 1500, 250, 40, 60}, spec_.ar1_coef);
        gen_plain("pet", VP{4.0, 0.8, 1.2, 0.08, 0.15, 0.3}, spec_.ar1_coef);
        gen_plain("swrad", VP{220, 40, 60, 4, 8, 0}, spec_.ar1_coef);
        gen_plain("wspd", VP{5, 1, 1.5, 0.2, 0.5, 0.1}, spec_.ar1_coef);
        gen_plain("wgust", VP{8, 1.5, 2, 0.3, 0.8, 0.1}, spec_.ar1_coef);
        gen_plain("ndvi", VP{0.4, 0.15, 0.15, 0.02, 0.03, -0.2, 1.0}, spec_.ar1_coef);
        gen_plain("evi", VP{0.35, 0.12, 0.12, 0.02, 0.03, -0.2, 1.0}, spec_.ar1_coef);
        gen_plain("lai", VP{2.0, 0.8, 0.7, 0.08, 0.12, 0.0}, spec_.ar1_coef);
        gen_plain("fpar", VP{0.5, 0.15, 0.15, 0.02, 0.03, 0.0, 1.0}, spec_.ar1_coef);

        // Evaporative stress ratio driver: fast-decorrelating noise so pooled
        // standardization is well conditioned. ET = ESR * PET keeps ESR <= ~1.
        std::vector<double> esr = generate_series("esr", VP{0.55, 0.1, 0.1, 0.03, 0.1, 0.05, 0.95},
                                                  total_days, spec_.esr_ar1_coef);

        // Soil moisture: interannual spread dominates daily noise (ratio ~30x)
        // so percentile series stay quiet outside injected events.
        gen_plain("sm1", VP{25, 6, 4, 1.2, 0.04, 0.5}, spec_.ar1_coef);
        gen_plain("sm2", VP{60, 10, 6, 2.5, 0.08, 1.0}, spec_.ar1_coef);
        gen_plain("sm3", VP{120, 15, 8, 4.0, 0.12, 2.0}, spec_.ar1_coef);
        gen_plain("sm4", VP{200, 20, 10, 6.0, 0.16, 4.0}, spec_.ar1_coef);

        // Apply the event envelopes: a wet priming spell leading into the
        // event (so the percentile drawdown has room to fall from), then the
        // drawdown itself with matched evaporative-stress and vegetation
        // declines.
        const double prime_scale = 2.5 * spec_.noise_scale;
        for (std::size_t k = 0; k < event_env.size(); ++k) {
            const double e = event_env[k];
            const double pr = prime_env[k] * prime_scale;
            if (e <= 0.0 && pr <= 0.0) continue;
            series["sm1"][k] = std::max(0.5, series["sm1"][k] + pr * 1.2 - e * 10.0);
            series["sm2"][k] = std::max(1.0, series["sm2"][k] + pr * 2.5 - e * 20.0);
            series["sm3"][k] = std::max(2.0, series["sm3"][k] + pr * 4.0 - e * 30.0);
            series["sm4"][k] = std::max(4.0, series["sm4"][k] + pr * 6.0 - e * 45.0);
            esr[k] = std::max(0.02, esr[k] * (1.0 - 0.7 * e));
            series["ndvi"][k] = std::max(-0.2, series["ndvi"][k] - 0.2 * e);
            series["evi"][k] = std::max(-0.2, series["evi"][k] - 0.15 * e);
            series["fpar"][k] = std::max(0.0, series["fpar"][k] - 0.2 * e);
            series["lai"][k] = std::max(0.0, series["lai"][k] - 0.5 * e);
        }

        // ET from the stress ratio.
        std::vector<double>& pet = series["pet"];
        std::vector<double> evap(pet.size());
        for (std::size_t k = 0; k < pet.size(); ++k) evap[k] = esr[k] * pet[k];
        series["evap"] = std::move(evap);

        // Precipitation closes the global moisture budget by construction:
        // <P(t)> = <E(t)> - (<M_w(t)> - <M_w(t-1)>)/dt, P >= 0 per cell.
        series["precip1d"] = generate_precip(series, event_env, total_days);

        for (const auto& [var, s] : series) write_series(ar, var, s, total_days);
        return ar;
    }

    const VariableCatalog& catalog() const { return catalog_; }

  private:
    std::mt19937_64 stream(const std::string& label) const { return make_stream(seed_, "synth/" + label); }

    std::vector<double> generate_series(const std::string& var, const detail_synth::VarParams& p,
                                        std::int64_t total_days, double ar1) const {
        const std::size_t cells = grid_.cells();
        auto rng_pat = stream(var + "/pattern");
        auto rng_noise = stream(var + "/noise");
        auto rng_inter = stream(var + "/interannual");
        const auto pat_static = detail_synth::harmonic_pattern(grid_.n_lat, grid_.n_lon, rng_pat);
        const auto pat_seas = detail_synth::harmonic_pattern(grid_.n_lat, grid_.n_lon, rng_pat);
        const auto pat_phase = detail_synth::harmonic_pattern(grid_.n_lat, grid_.n_lon, rng_pat);
        std::normal_distribution<double> nd(0.0, 1.0);

        // Interannual offsets: evenly spaced unit-variance levels, permuted
        // per cell. Even spacing keeps year clusters separated in percentile
        // space, so day-to-day noise cannot hop between years.
        const std::size_t ny = spec_.years.size();
        std::vector<double> levels(ny, 0.0);
        if (ny > 1) {
            const double denom = std::sqrt((static_cast<double>(ny) * ny - 1.0) / 12.0);
            for (std::size_t k = 0; k < ny; ++k)
                levels[k] = (static_cast<double>(k) - (static_cast<double>(ny) - 1.0) / 2.0) / denom;
        }
        std::vector<double> inter(ny * cells);
        std::vector<std::size_t> perm(ny);
        for (std::size_t c = 0; c < cells; ++c) {
            for (std::size_t k = 0; k < ny; ++k) perm[k] = k;
            std::shuffle(perm.begin(), perm.end(), rng_inter);
            for (std::size_t y = 0; y < ny; ++y) inter[y * cells + c] = levels[perm[y]];
        }

        std::vector<double> out(static_cast<std::size_t>(total_days) * cells);
        std::vector<double> ar_state(cells, 0.0);
        const double innov = std::sqrt(std::max(0.0, 1.0 - ar1 * ar1));
        const Date first{spec_.years.front(), 1, 1};
        std::size_t year_index = 0;
        int year_cursor = spec_.years.front();
        for (std::int64_t t = 0; t < total_days; ++t) {
            const Date date = add_days(first, t);
            if (date.year != year_cursor) {
                year_cursor = date.year;
                ++year_index;
            }
            const double phase = 2.0 * M_PI * (ring_position(date) - 1) / 365.0;
            for (std::size_t c = 0; c < cells; ++c) {
                ar_state[c] = ar1 * ar_state[c] + innov * nd(rng_noise);
                double v = p.base + p.static_amp * pat_static[c] +
                           p.seasonal_amp * pat_seas[c] * std::sin(phase + 0.7 * M_PI * pat_phase[c]) +
                           spec_.noise_scale * (p.inter_amp * inter[year_index * cells + c] +
                                                p.daily_amp * ar_state[c]);
                out[static_cast<std::size_t>(t) * cells + c] = std::clamp(v, p.min_value, p.max_value);
            }
        }
        return out;
    }

    void build_event_envelope(std::vector<double>& env, std::vector<double>& prime,
                              std::int64_t total_days) const {
        const std::size_t cells = grid_.cells();
        for (const auto& ev : spec_.events) {
            auto it = std::find(spec_.years.begin(), spec_.years.end(), ev.year);
            if (it == spec_.years.end())
                throw std::invalid_argument("synth: event year outside archive years");
            std::int64_t year_start = 0;
            for (int y : spec_.years) {
                if (y == ev.year) break;
                year_start += days_in_year(y);
            }
            const std::int64_t day0 = year_start + ev.start_doy - 1;
            const int ramp = std::min(15, ev.length_days);
            auto paint = [&](std::int64_t t, double level, std::vector<double>& dst) {
                if (t < 0 || t >= total_days || level <= 0.0) return;
                for (int i = 0; i < grid_.n_lat; ++i) {
                    const double lat = grid_.lat[static_cast<std::size_t>(i)];
                    if (lat < ev.lat0 || lat > ev.lat1) continue;
                    for (int j = 0; j < grid_.n_lon; ++j) {
                        const double lon = grid_.lon[static_cast<std::size_t>(j)];
                        if (lon < ev.lon0 || lon > ev.lon1) continue;
                        double& e = dst[static_cast<std::size_t>(t) * cells +
                                        static_cast<std::size_t>(i) * grid_.n_lon + j];
                        e = std::max(e, level);
                    }
                }
            };
            // Wet priming from the start of the event year, fading across the
            // drawdown ramp.
            for (std::int64_t t = year_start; t < day0; ++t) paint(t, 1.0, prime);
            for (int d = 0; d < ramp; ++d)
                paint(day0 + d, 1.0 - static_cast<double>(d + 1) / ramp, prime);
            // Drawdown ramp, hold, and recovery.
            for (int d = 0; d < ev.length_days + 20; ++d) {
                double level;
                if (d < ramp) level = static_cast<double>(d + 1) / ramp;
                else if (d < ev.length_days) level = 1.0;
                else level = std::max(0.0, 1.0 - static_cast<double>(d - ev.length_days) / 20.0);
                paint(day0 + d, level, env);
            }
        }
    }

    std::vector<double> generate_precip(const std::map<std::string, std::vector<double>>& series,
                                        const std::vector<double>& event_env,
                                        std::int64_t total_days) const {
        const std::size_t cells = grid_.cells();
        auto rng_pat = stream("precip1d/pattern");
        auto rng_noise = stream("precip1d/noise");
        const auto pat = detail_synth::harmonic_pattern(grid_.n_lat, grid_.n_lon, rng_pat);
        std::normal_distribution<double> nd(0.0, 1.0);
        const auto& q500 = series.at("qtot500");
        const auto& q200 = series.at("qtot200");
        const auto& evap = series.at("evap");
        const std::vector<double> w = grid_.cell_weights();
        const double wsum = static_cast<double>(cells);

        auto col_moisture_mean = [&](std::int64_t t) {
            double acc = 0.0;
            const std::size_t off = static_cast<std::size_t>(t) * cells;
            for (std::size_t c = 0; c < cells; ++c)
                acc += w[c] * (40000.0 * q500[off + c] + 25000.0 * q200[off + c]) / 9.80665;
            return acc / wsum;
        };

        std::vector<double> out(static_cast<std::size_t>(total_days) * cells);
        std::vector<double> ar_state(cells, 0.0);
        const double rho = spec_.ar1_coef;
        const double innov = std::sqrt(std::max(0.0, 1.0 - rho * rho));
        double m_prev = col_moisture_mean(0);
        for (std::int64_t t = 0; t < total_days; ++t) {
            const std::size_t off = static_cast<std::size_t>(t) * cells;
            double e_mean = 0.0;
            for (std::size_t c = 0; c < cells; ++c) e_mean += w[c] * evap[off + c];
            e_mean /= wsum;
            const double m_now = col_moisture_mean(t);
            const double target = t == 0 ? e_mean : e_mean - (m_now - m_prev);
            m_prev = m_now;
            // Positive raw pattern, event-suppressed, rescaled to the target mean.
            double raw_mean = 0.0;
            for (std::size_t c = 0; c < cells; ++c) {
                ar_state[c] = rho * ar_state[c] + innov * nd(rng_noise);
                double raw = std::exp(0.9 * pat[c] + 0.6 * spec_.noise_scale * ar_state[c]);
                raw *= 1.0 - 0.8 * event_env[off + c];
                out[off + c] = raw;
                raw_mean += w[c] * raw;
            }
            raw_mean /= wsum;
            const double scale = target > 0.0 && raw_mean > 0.0 ? target / raw_mean : 0.0;
            for (std::size_t c = 0; c < cells; ++c) out[off + c] *= scale;
        }
        return out;
    }

    void write_series(Archive& ar, const std::string& var, const std::vector<double>& s,
                      std::int64_t total_days) const {
        const std::size_t cells = grid_.cells();
        const auto& def = catalog_.get(var);
        const bool sparse_obs = def.name == "ndvi" || def.name == "evi" || def.name == "lai" ||
                                def.name == "fpar";
        std::int64_t day0 = 0;
        for (int y : spec_.years) {
            const int days = days_in_year(y);
            std::vector<float> cube(static_cast<std::size_t>(days) * cells);
            for (int d = 0; d < days; ++d) {
                const std::int64_t t = day0 + d;
                const bool observed = !sparse_obs || (t % spec_.veg_obs_period == 0);
                for (std::size_t c = 0; c < cells; ++c)
                    cube[static_cast<std::size_t>(d) * cells + c] =
                        observed ? static_cast<float>(s[static_cast<std::size_t>(t) * cells + c])
                                 : kFillValue;
            }
            ar.write_cube(var, y, cube, def.units, role_name(def.role), "synth");
            day0 += days;
        }
        (void)total_days;
    }

    void write_statics(Archive& ar) const {
        const std::size_t cells = grid_.cells();
        auto rng = stream("statics");
        auto land_pat = detail_synth::harmonic_pattern(grid_.n_lat, grid_.n_lon, rng);
        auto veg_pat = detail_synth::harmonic_pattern(grid_.n_lat, grid_.n_lon, rng);
        auto cover_pat = detail_synth::harmonic_pattern(grid_.n_lat, grid_.n_lon, rng);
        std::vector<float> lsm(cells), hvt(cells), hvc(cells), lvt(cells), lvc(cells);
        for (std::size_t c = 0; c < cells; ++c) {
            lsm[c] = land_pat[c] > -0.1f ? 1.0f : 0.0f;
            hvt[c] = static_cast<float>(1 + static_cast<int>(std::floor((veg_pat[c] + 1.0) * 2.9)));
            lvt[c] = static_cast<float>(1 + static_cast<int>(std::floor((cover_pat[c] + 1.0) * 2.9)));
            hvc[c] = static_cast<float>(std::clamp(0.5 + 0.5 * veg_pat[c], 0.0, 1.0));
            lvc[c] = static_cast<float>(std::clamp(0.5 - 0.4 * cover_pat[c], 0.0, 1.0));
        }
        ar.write_static("lsm", lsm, "1", "synth");
        ar.write_static("hveg_type", hvt, "1", "synth");
        ar.write_static("hveg_cover", hvc, "1", "synth");
        ar.write_static("lveg_type", lvt, "1", "synth");
        ar.write_static("lveg_cover", lvc, "1", "synth");
    }

    void write_scalar_series(Archive& ar) const {
        for (const std::string var : {"enso", "iod"}) {
            auto rng = stream(var);
            std::normal_distribution<double> nd(0.0, 1.0);
            std::map<std::int64_t, double> s;
            double state = nd(rng);
            for (int y : spec_.years) {
                const Date start{y, 1, 1};
                for (int d = 0; d < days_in_year(y); ++d) {
                    state = 0.98 * state + std::sqrt(1.0 - 0.98 * 0.98) * nd(rng);
                    s[serial_from_date(add_days(start, d))] = spec_.noise_scale * state;
                }
            }
            ar.write_scalar_series(var, s);
        }
    }

    GridSpec grid_;
    SynthSpec spec_;
    std::uint64_t seed_;
    VariableCatalog catalog_;
};

// ---------------------------------------------------------------------------
// Archive coarsening (0.25 degree -> 1 degree style 4x block means)
// ---------------------------------------------------------------------------

// Produces a raw-stage archive at a quarter of the input resolution; every
// cube, static field and scalar series carries over, coarsened where gridded.
inline Archive coarsen_archive(const Archive& fine, const std::filesystem::path& out_dir,
                               const VariableCatalog& catalog, Provenance prov) {
    const GridSpec& fg = fine.grid();
    if (fg.n_lat % 4 != 0 || fg.n_lon % 4 != 0)
        throw std::invalid_argument("coarsen: fine grid extents not divisible by 4");
    std::vector<double> clat(static_cast<std::size_t>(fg.n_lat / 4)), clon(static_cast<std::size_t>(fg.n_lon / 4));
    for (std::size_t i = 0; i < clat.size(); ++i)
        clat[i] = 0.25 * (fg.lat[4 * i] + fg.lat[4 * i + 1] + fg.lat[4 * i + 2] + fg.lat[4 * i + 3]);
    for (std::size_t j = 0; j < clon.size(); ++j)
        clon[j] = 0.25 * (fg.lon[4 * j] + fg.lon[4 * j + 1] + fg.lon[4 * j + 2] + fg.lon[4 * j + 3]);
    GridSpec cg = GridSpec::from_axes(std::move(clat), std::move(clon));
    prov.stage = "raw";
    Archive out = Archive::create(out_dir, cg, fine.years(), catalog, prov);
    const std::size_t fcells = fg.cells(), ccells = cg.cells();

    auto coarsen_frame = [&](const float* src, std::vector<float>& dst, std::size_t off) {
        std::vector<double> frame(fcells);
        for (std::size_t i = 0; i < fcells; ++i) frame[i] = src[i];
        std::vector<double> c = coarsen_4x(frame, fg.n_lat, fg.n_lon, fg.lat);
        for (std::size_t i = 0; i < ccells; ++i)
            dst[off + i] = is_missing(c[i]) ? kFillValue : static_cast<float>(c[i]);
    };

    for (const auto& def : catalog.all()) {
        if (def.scalar_series) {
            out.write_scalar_series(def.name, fine.scalar_series(def.name));
        } else if (def.role == VarRole::static_field) {
            const auto f = fine.static_field(def.name);
            std::vector<float> c(ccells);
            coarsen_frame(f->data(), c, 0);
            if (def.categorical)  // block means of categories are meaningless; round
                for (auto& v : c)
                    if (!is_missing(v)) v = std::round(v);
            out.write_static(def.name, c, def.units, "coarsen");
        } else if (def.role == VarRole::cyclic_forcing || def.name == "precip30d") {
            // derived later in preprocessing
        } else {
            for (int y : fine.years()) {
                if (!fine.has_cube(def.name, y)) continue;
                const auto cube = fine.cube(def.name, y);
                const int days = days_in_year(y);
                std::vector<float> c(static_cast<std::size_t>(days) * ccells);
                for (int d = 0; d < days; ++d)
                    coarsen_frame(cube->data() + static_cast<std::size_t>(d) * fcells, c,
                                  static_cast<std::size_t>(d) * ccells);
                out.write_cube(def.name, y, c, def.units, role_name(def.role), "coarsen");
            }
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Preprocessing driver: raw archive -> model-ready archive
// ---------------------------------------------------------------------------

// Gap-fills observation-cadence variables, derives the 30-day precipitation
// accumulation and the cyclic forcing channel, builds climatologies for all
// output variables (plus the evaporative stress ratio), and computes
// normalization statistics from the training years only.
inline Archive preprocess_archive(const Archive& raw, const std::filesystem::path& out_dir,
                                  const VariableCatalog& catalog, const DatasetSplit& split,
                                  Provenance prov) {
    const GridSpec& g = raw.grid();
    const std::size_t cells = g.cells();
    prov.stage = "preprocessed";
    Archive out = Archive::create(out_dir, g, raw.years(), catalog, prov);

    // Copy statics and scalar series.
    for (const std::string var : {"lsm", "hveg_type", "hveg_cover", "lveg_type", "lveg_cover"}) {
        const auto& def = catalog.get(var);
        out.write_static(var, *raw.static_field(var), def.units, "preprocess");
    }
    for (const std::string var : {"enso", "iod"}) out.write_scalar_series(var, raw.scalar_series(var));

    // Gap fill sparse observation variables; copy dense cubes; derive precip30d.
    const std::vector<std::string> sparse_vars = {"ndvi", "evi", "lai", "fpar"};
    std::vector<std::string> dense_vars;
    for (const auto& def : catalog.all()) {
        if (def.scalar_series || def.role == VarRole::static_field || def.role == VarRole::cyclic_forcing)
            continue;
        if (def.name == "precip30d") continue;
        if (std::find(sparse_vars.begin(), sparse_vars.end(), def.name) == sparse_vars.end())
            dense_vars.push_back(def.name);
    }

    std::int64_t total_days = 0;
    for (int y : raw.years()) total_days += days_in_year(y);

    auto full_series = [&](const std::string& var) {
        std::vector<double> s(static_cast<std::size_t>(total_days) * cells);
        std::int64_t day0 = 0;
        for (int y : raw.years()) {
            const auto cube = raw.cube(var, y);
            const int days = days_in_year(y);
            for (std::size_t i = 0; i < static_cast<std::size_t>(days) * cells; ++i)
                s[static_cast<std::size_t>(day0) * cells + i] = (*cube)[i];
            day0 += days;
        }
        return s;
    };

    auto write_full_series = [&](const std::string& var, const std::vector<double>& s) {
        const auto& def = catalog.get(var);
        std::int64_t day0 = 0;
        for (int y : raw.years()) {
            const int days = days_in_year(y);
            std::vector<float> cube(static_cast<std::size_t>(days) * cells);
            for (std::size_t i = 0; i < cube.size(); ++i) {
                const double v = s[static_cast<std::size_t>(day0) * cells + i];
                cube[i] = is_missing(v) ? kFillValue : static_cast<float>(v);
            }
            out.write_cube(var, y, cube, def.units, role_name(def.role), "preprocess");
            day0 += days;
        }
    };

    for (const auto& var : dense_vars) write_full_series(var, full_series(var));

    for (const auto& var : sparse_vars) {
        std::vector<double> s = full_series(var);
        // Forward fill per cell along the full concatenated series.
        std::vector<double> col(static_cast<std::size_t>(total_days));
        for (std::size_t c = 0; c < cells; ++c) {
            for (std::int64_t t = 0; t < total_days; ++t) col[static_cast<std::size_t>(t)] = s[static_cast<std::size_t>(t) * cells + c];
            col = gap_fill_forward(col);
            for (std::int64_t t = 0; t < total_days; ++t) s[static_cast<std::size_t>(t) * cells + c] = col[static_cast<std::size_t>(t)];
        }
        write_full_series(var, s);
    }

    // 30-day accumulation from daily precipitation.
    {
        std::vector<double> p = full_series("precip1d");
        std::vector<double> acc(p.size());
        std::vector<double> col(static_cast<std::size_t>(total_days));
        for (std::size_t c = 0; c < cells; ++c) {
            for (std::int64_t t = 0; t < total_days; ++t) col[static_cast<std::size_t>(t)] = p[static_cast<std::size_t>(t) * cells + c];
            std::vector<double> a = running_accumulation_30(col);
            for (std::int64_t t = 0; t < total_days; ++t) acc[static_cast<std::size_t>(t) * cells + c] = a[static_cast<std::size_t>(t)];
        }
        write_full_series("precip30d", acc);
    }

    // Cyclic forcing: day-of-year mean of the radiation variable.
    out.write_cycle("swrad_clim", build_cyclic_forcing(out, "swrad", split.train),
                    catalog.get("swrad_clim").units, "preprocess");

    // Climatologies for every output variable.
    for (const auto* def : catalog.outputs()) {
        ClimatologyTable t = build_climatology(out, def->name, split.train);
        out.write_climatology(def->name, t.mean, t.stdd, def->units);
    }
    // Evaporative stress ratio climatology for SESR (ET/PET from the archive;
    // esr is a derived series, not a catalog channel).
    {
        std::vector<double> evap = full_series("evap");
        std::vector<double> pet = full_series("pet");
        std::vector<double> esr(evap.size(), kFillValue);
        for (std::size_t i = 0; i < esr.size(); ++i)
            if (!is_missing(evap[i]) && !is_missing(pet[i]) && pet[i] >= 1e-6) esr[i] = evap[i] / pet[i];
        std::int64_t day0 = 0;
        for (int y : raw.years()) {
            const int days = days_in_year(y);
            std::vector<float> cube(static_cast<std::size_t>(days) * cells);
            for (std::size_t i = 0; i < cube.size(); ++i) {
                const double v = esr[static_cast<std::size_t>(day0) * cells + i];
                cube[i] = is_missing(v) ? kFillValue : static_cast<float>(v);
            }
            out.write_cube("esr", y, cube, "1", "derived", "preprocess");
            day0 += days;
        }
        ClimatologyTable t = build_climatology(out, "esr", split.train);
        out.write_climatology("esr", t.mean, t.stdd, "1");
    }

    out.write_stats(compute_norm_stats(out, catalog, split.train));
    return out;
}

}  // namespace droughtcast
