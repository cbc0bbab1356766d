#pragma once

// Forecast verification: climatology and persistence baselines, RMSE, ACC,
// ratio of predictable components (RPC), Diebold-Mariano significance, region
// masks, evaluation of constrained rollouts over a set of initialization
// dates, and delimited-text scorecard export.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <functional>
#include <future>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "droughtcast/archive.hpp"
#include "droughtcast/forecast.hpp"
#include "droughtcast/grid.hpp"
#include "droughtcast/indices.hpp"

namespace droughtcast {

// ---------------------------------------------------------------------------
// Region masks
// ---------------------------------------------------------------------------

struct RegionMask {
    std::string name;
    std::vector<bool> mask;

    static RegionMask global(const GridSpec& g) {
        return RegionMask{"global", std::vector<bool>(g.cells(), true)};
    }

    // Land cells (land-sea static channel >= 0.5) inside lat [-35, 38],
    // lon [-18, 52].
    static RegionMask africa(const GridSpec& g, const std::vector<double>& land_sea) {
        if (land_sea.size() != g.cells()) throw std::invalid_argument("africa mask: lsm size mismatch");
        RegionMask m{"africa", std::vector<bool>(g.cells(), false)};
        bool any = false;
        for (int i = 0; i < g.n_lat; ++i)
            for (int j = 0; j < g.n_lon; ++j) {
                const std::size_t k = static_cast<std::size_t>(i) * g.n_lon + j;
                const double lat = g.lat[static_cast<std::size_t>(i)], lon = g.lon[static_cast<std::size_t>(j)];
                if (lat >= -35.0 && lat <= 38.0 && lon >= -18.0 && lon <= 52.0 && land_sea[k] >= 0.5) {
                    m.mask[k] = true;
                    any = true;
                }
            }
        if (!any) throw std::invalid_argument("africa mask: no cells selected");
        return m;
    }
};

// ---------------------------------------------------------------------------
// Baselines
// ---------------------------------------------------------------------------

// Climatological mean for the day-of-year of (init + lead).
inline std::vector<double> climatology_forecast(const Date& init, int lead, const ClimatologyView& clim) {
    const int slot = climatology_slot(add_days(init, lead));
    std::vector<double> out(clim.cells);
    for (std::size_t c = 0; c < clim.cells; ++c) out[c] = clim.mean_at(slot, c);
    return out;
}

// The initial condition repeated at every lead.
inline std::vector<double> persistence_forecast(const std::vector<double>& init_field, int /*lead*/) {
    return init_field;
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

// Area-weighted RMSE over masked cells; missing cells are skipped.
inline double rmse(const std::vector<double>& pred, const std::vector<double>& truth, const GridSpec& g,
                   const RegionMask& mask) {
    if (pred.size() != truth.size() || pred.size() != g.cells())
        throw std::invalid_argument("rmse: size mismatch");
    double acc = 0.0, wsum = 0.0;
    for (int i = 0; i < g.n_lat; ++i) {
        const double w = g.row_weight[static_cast<std::size_t>(i)];
        for (int j = 0; j < g.n_lon; ++j) {
            const std::size_t k = static_cast<std::size_t>(i) * g.n_lon + j;
            if (!mask.mask[k] || is_missing(pred[k]) || is_missing(truth[k])) continue;
            const double d = pred[k] - truth[k];
            acc += w * d * d;
            wsum += w;
        }
    }
    if (wsum <= 0.0) throw std::invalid_argument("rmse: empty masked overlap");
    return std::sqrt(acc / wsum);
}

// Area-weighted centered anomaly correlation over the mask. Undefined when
// either centered field has vanished variance.
inline std::optional<double> acc(const std::vector<double>& pred_anom,
                                 const std::vector<double>& truth_anom, const GridSpec& g,
                                 const RegionMask& mask) {
    if (pred_anom.size() != truth_anom.size() || pred_anom.size() != g.cells())
        throw std::invalid_argument("acc: size mismatch");
    double wsum = 0.0, mp = 0.0, mt = 0.0;
    for (int i = 0; i < g.n_lat; ++i) {
        const double w = g.row_weight[static_cast<std::size_t>(i)];
        for (int j = 0; j < g.n_lon; ++j) {
            const std::size_t k = static_cast<std::size_t>(i) * g.n_lon + j;
            if (!mask.mask[k] || is_missing(pred_anom[k]) || is_missing(truth_anom[k])) continue;
            mp += w * pred_anom[k];
            mt += w * truth_anom[k];
            wsum += w;
        }
    }
    if (wsum <= 0.0) return std::nullopt;
    mp /= wsum;
    mt /= wsum;
    double spp = 0.0, stt = 0.0, spt = 0.0;
    for (int i = 0; i < g.n_lat; ++i) {
        const double w = g.row_weight[static_cast<std::size_t>(i)];
        for (int j = 0; j < g.n_lon; ++j) {
            const std::size_t k = static_cast<std::size_t>(i) * g.n_lon + j;
            if (!mask.mask[k] || is_missing(pred_anom[k]) || is_missing(truth_anom[k])) continue;
            const double a = pred_anom[k] - mp, b = truth_anom[k] - mt;
            spp += w * a * a;
            stt += w * b * b;
            spt += w * a * b;
        }
    }
    if (spp < 1e-24 || stt < 1e-24) return std::nullopt;
    return spt / std::sqrt(spp * stt);
}

// Ratio of predictable components per cell over initialization dates:
//   rho   = corr(pred, truth)
//   rho_f = sqrt(sigma_m^2 / (sigma_m^2 + sigma_eps^2)), sigma_eps = var(truth - pred)
//   RPC   = rho / rho_f
// Variances are population variances over the init-date sample. Cells with
// vanished model or truth variance are flagged undefined, not NaN.
struct RpcAccumulator {
    std::size_t cells = 0;
    std::int64_t n = 0;
    std::vector<double> sp, st, spp, stt, spt;  // sums over init dates

    explicit RpcAccumulator(std::size_t cells_ = 0) { reset(cells_); }

    void reset(std::size_t cells_) {
        cells = cells_;
        n = 0;
        sp.assign(cells, 0.0);
        st.assign(cells, 0.0);
        spp.assign(cells, 0.0);
        stt.assign(cells, 0.0);
        spt.assign(cells, 0.0);
    }

    void add(const std::vector<double>& pred_anom, const std::vector<double>& truth_anom) {
        if (pred_anom.size() != cells || truth_anom.size() != cells)
            throw std::invalid_argument("rpc: size mismatch");
        ++n;
        for (std::size_t c = 0; c < cells; ++c) {
            sp[c] += pred_anom[c];
            st[c] += truth_anom[c];
            spp[c] += pred_anom[c] * pred_anom[c];
            stt[c] += truth_anom[c] * truth_anom[c];
            spt[c] += pred_anom[c] * truth_anom[c];
        }
    }

    struct Result {
        std::optional<double> mask_mean;  // area-weighted over defined cells
        std::vector<double> per_cell;     // kFillValue where undefined
        int defined_cells = 0;
    };

    Result finalize(const GridSpec& g, const RegionMask& mask, double var_floor = 1e-12) const {
        Result r;
        r.per_cell.assign(cells, kFillValue);
        if (n < 3) return r;  // needs at least 3 init dates
        double acc_v = 0.0, wsum = 0.0;
        const double invn = 1.0 / static_cast<double>(n);
        for (int i = 0; i < g.n_lat; ++i) {
            const double w = g.row_weight[static_cast<std::size_t>(i)];
            for (int j = 0; j < g.n_lon; ++j) {
                const std::size_t c = static_cast<std::size_t>(i) * g.n_lon + j;
                const double mp = sp[c] * invn, mt = st[c] * invn;
                const double var_m = spp[c] * invn - mp * mp;
                const double var_t = stt[c] * invn - mt * mt;
                const double cov = spt[c] * invn - mp * mt;
                // sigma_eps^2 = var(truth - pred) = var_t + var_m - 2 cov
                const double var_e = std::max(0.0, var_t + var_m - 2.0 * cov);
                if (var_m < var_floor || var_t < var_floor) continue;
                const double rho = cov / std::sqrt(var_m * var_t);
                const double rho_f = std::sqrt(var_m / (var_m + var_e));
                if (rho_f <= 0.0) continue;
                r.per_cell[c] = rho / rho_f;
                if (mask.mask[c]) {
                    acc_v += w * r.per_cell[c];
                    wsum += w;
                    ++r.defined_cells;
                }
            }
        }
        if (wsum > 0.0) r.mask_mean = acc_v / wsum;
        return r;
    }
};

// Direct (non-accumulated) RPC over init-date series for one cell; the
// worked-example form.
inline std::optional<double> rpc_single(const std::vector<double>& pred, const std::vector<double>& truth,
                                        double var_floor = 1e-12) {
    if (pred.size() != truth.size() || pred.size() < 3)
        throw std::invalid_argument("rpc: need >= 3 init dates");
    const double n = static_cast<double>(pred.size());
    double mp = 0.0, mt = 0.0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        mp += pred[i];
        mt += truth[i];
    }
    mp /= n;
    mt /= n;
    double vm = 0.0, vt = 0.0, cov = 0.0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        vm += (pred[i] - mp) * (pred[i] - mp);
        vt += (truth[i] - mt) * (truth[i] - mt);
        cov += (pred[i] - mp) * (truth[i] - mt);
    }
    vm /= n;
    vt /= n;
    cov /= n;
    double ve = 0.0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const double e = truth[i] - pred[i] - (mt - mp);
        ve += e * e;
    }
    ve /= n;
    if (vm < var_floor || vt < var_floor) return std::nullopt;
    const double rho = cov / std::sqrt(vm * vt);
    const double rho_f = std::sqrt(vm / (vm + ve));
    return rho / rho_f;
}

// Diebold-Mariano test on squared-error loss differentials with
// autocovariance-corrected variance (rectangular truncation at lag h-1) and a
// two-sided standard-normal p-value.
struct DmResult {
    double statistic = 0.0;
    double p_value = 1.0;
};

inline DmResult dm_test(const std::vector<double>& errors_a, const std::vector<double>& errors_b,
                        int horizon) {
    if (errors_a.size() != errors_b.size()) throw std::invalid_argument("dm_test: length mismatch");
    const std::int64_t t_count = static_cast<std::int64_t>(errors_a.size());
    if (horizon < 1) throw std::invalid_argument("dm_test: horizon must be >= 1");
    if (t_count < 2 * horizon) throw std::invalid_argument("dm_test: series too short for horizon");
    std::vector<double> d(errors_a.size());
    for (std::size_t i = 0; i < d.size(); ++i)
        d[i] = errors_a[i] * errors_a[i] - errors_b[i] * errors_b[i];
    double mean = 0.0;
    for (double v : d) mean += v;
    mean /= static_cast<double>(t_count);
    double vhat = 0.0;
    for (int lag = 0; lag < horizon; ++lag) {
        double gamma = 0.0;
        for (std::int64_t t = lag; t < t_count; ++t)
            gamma += (d[static_cast<std::size_t>(t)] - mean) * (d[static_cast<std::size_t>(t - lag)] - mean);
        gamma /= static_cast<double>(t_count);
        vhat += lag == 0 ? gamma : 2.0 * gamma;
    }
    DmResult r;
    if (vhat <= 0.0) return r;  // degenerate differential variance
    r.statistic = mean / std::sqrt(vhat / static_cast<double>(t_count));
    r.p_value = std::erfc(std::abs(r.statistic) / std::sqrt(2.0));
    return r;
}

// ---------------------------------------------------------------------------
// Rollout evaluation
// ---------------------------------------------------------------------------

struct MetricRow {
    std::string variable;
    int lead = 0;
    int n_init = 0;
    double rmse_model = 0.0, rmse_model_std = 0.0;
    double rmse_clim = 0.0, rmse_pers = 0.0;
    std::optional<double> acc_model, acc_model_std, acc_pers;
    std::optional<double> rpc;
    int rpc_defined_cells = 0;
    std::optional<double> dm_stat_clim, dm_p_clim;
    std::optional<double> rmse_model_mamjja, rmse_model_sondjf;
};

struct AnomalyDistributionRow {
    std::string variable;
    int lead = 0;
    double pred_min = 0, pred_mean = 0, pred_max = 0;
    double truth_min = 0, truth_mean = 0, truth_max = 0;
};

struct SkillReport {
    std::string mask_name;
    std::string weighting = "area_weighted";
    std::vector<MetricRow> rows;
    std::vector<AnomalyDistributionRow> anomalies;
    std::vector<std::string> incidents;
    int n_init_dates = 0;
    Provenance provenance;
};

struct EvalOptions {
    int max_lead = 90;
    int init_stride = 1;  // evaluate every Nth test day
    int anomaly_leads_every = 10;
    int threads = 1;  // rollout workers; metric merge stays in init order
};

inline bool init_in_mamjja(const Date& d) { return d.month >= 3 && d.month <= 8; }

using RolloutFn = std::function<ForecastRollout(const Date&, int)>;

// Evaluates rollouts from every usable initialization date in the test years
// against truth, climatology and persistence. Metrics are averaged over init
// dates; RPC is per-cell-first, then area-averaged over the mask. The rollout
// source is injectable so oracle forecasters (climatology emitter, identity)
// can stand in for the network.
inline std::vector<SkillReport> rollout_evaluate(const RolloutFn& make_rollout, const Archive& ar,
                                                 const VariableCatalog& catalog,
                                                 const std::vector<int>& test_years,
                                                 const std::vector<RegionMask>& masks,
                                                 const EvalOptions& opt) {
    const GridSpec& g = ar.grid();
    const std::size_t cells = g.cells();
    const auto outputs = catalog.outputs();
    const int n_vars = catalog.n_outputs();

    // Usable init dates: truth must exist through init + max_lead.
    std::set<int> archive_years(ar.years().begin(), ar.years().end());
    std::vector<Date> inits;
    {
        int counter = 0;
        for (int y : test_years) {
            for (int d = 0; d < days_in_year(y); ++d) {
                const Date date = add_days(Date{y, 1, 1}, d);
                if (!archive_years.count(add_days(date, opt.max_lead).year)) continue;
                if (counter++ % opt.init_stride != 0) continue;
                inits.push_back(date);
            }
        }
    }
    if (inits.empty()) throw std::invalid_argument("evaluate: no usable init dates");

    std::map<std::string, ClimatologyView> clim;
    for (const auto* def : outputs) clim.emplace(def->name, ClimatologyView::from(ar, def->name));

    // Per (var, lead) series over init dates; rollouts run once and every
    // mask's metric pass runs inline within the lead loop.
    const std::size_t n_series = static_cast<std::size_t>(n_vars) * opt.max_lead;
    auto key = [n_vars](int var, int lead) { return static_cast<std::size_t>(lead - 1) * n_vars + var; };

    std::vector<std::string> incidents;
    std::vector<SkillReport> reports;

    struct MaskSeries {
        std::vector<std::vector<double>> rmse_m, rmse_c, rmse_p, acc_m, acc_p;
        std::vector<RpcAccumulator> rpc;
        std::vector<std::vector<double>> an_pred, an_truth;
    };
    std::vector<MaskSeries> per_mask(masks.size());
    for (auto& ms : per_mask) {
        ms.rmse_m.resize(n_series);
        ms.rmse_c.resize(n_series);
        ms.rmse_p.resize(n_series);
        ms.acc_m.resize(n_series);
        ms.acc_p.resize(n_series);
        ms.rpc.assign(n_series, RpcAccumulator(cells));
        ms.an_pred.resize(n_series);
        ms.an_truth.resize(n_series);
    }
    std::vector<bool> season_flags;

    // Rollouts may be produced by a small worker pool; the metric pass always
    // consumes them in init-date order so results are independent of the
    // thread count.
    const int workers = std::max(1, opt.threads);
    std::vector<std::future<ForecastRollout>> pending;
    std::size_t next_launch = 0;
    auto launch = [&]() {
        while (next_launch < inits.size() && pending.size() < static_cast<std::size_t>(workers)) {
            const Date d = inits[next_launch++];
            if (workers == 1)
                pending.push_back(std::async(std::launch::deferred, make_rollout, d, opt.max_lead));
            else
                pending.push_back(std::async(std::launch::async, make_rollout, d, opt.max_lead));
        }
    };
    launch();
    for (std::size_t ii = 0; ii < inits.size(); ++ii) {
        const Date& init = inits[ii];
        ForecastRollout roll;
        try {
            roll = pending.front().get();
            pending.erase(pending.begin());
            launch();
        } catch (const NumericIncident& e) {
            pending.erase(pending.begin());
            launch();
            incidents.push_back(std::string(e.what()));
            continue;
        }
        season_flags.push_back(init_in_mamjja(init));
        Tensor init_truth = assemble_target(ar, init, catalog);
        for (int lead = 1; lead <= opt.max_lead; ++lead) {
            const Date vdate = add_days(init, lead);
            Tensor truth = assemble_target(ar, vdate, catalog);
            for (int v = 0; v < n_vars; ++v) {
                const std::string& var = outputs[static_cast<std::size_t>(v)]->name;
                const ClimatologyView& cv = clim.at(var);
                std::vector<double> pred_f = roll.field(lead, v);
                const double* tptr = truth.values().data() + static_cast<std::size_t>(v) * cells;
                std::vector<double> truth_f(tptr, tptr + cells);
                const double* iptr = init_truth.values().data() + static_cast<std::size_t>(v) * cells;
                std::vector<double> pers_f(iptr, iptr + cells);
                std::vector<double> clim_f = climatology_forecast(init, lead, cv);
                std::vector<double> pred_a = anomaly(pred_f, cv, vdate);
                std::vector<double> truth_a = anomaly(truth_f, cv, vdate);
                std::vector<double> pers_a = anomaly(pers_f, cv, vdate);
                const std::size_t kk = key(v, lead);
                for (std::size_t mi = 0; mi < masks.size(); ++mi) {
                    auto& ms = per_mask[mi];
                    const RegionMask& mask = masks[mi];
                    ms.rmse_m[kk].push_back(rmse(pred_f, truth_f, g, mask));
                    ms.rmse_c[kk].push_back(rmse(clim_f, truth_f, g, mask));
                    ms.rmse_p[kk].push_back(rmse(pers_f, truth_f, g, mask));
                    if (auto a = acc(pred_a, truth_a, g, mask)) ms.acc_m[kk].push_back(*a);
                    if (auto a = acc(pers_a, truth_a, g, mask)) ms.acc_p[kk].push_back(*a);
                    ms.rpc[kk].add(pred_a, truth_a);
                    // Mask-averaged anomaly samples (distribution rows).
                    double ap = 0.0, at = 0.0, w = 0.0;
                    for (int i = 0; i < g.n_lat; ++i)
                        for (int j = 0; j < g.n_lon; ++j) {
                            const std::size_t c = static_cast<std::size_t>(i) * g.n_lon + j;
                            if (!mask.mask[c] || is_missing(pred_a[c]) || is_missing(truth_a[c])) continue;
                            ap += g.row_weight[static_cast<std::size_t>(i)] * pred_a[c];
                            at += g.row_weight[static_cast<std::size_t>(i)] * truth_a[c];
                            w += g.row_weight[static_cast<std::size_t>(i)];
                        }
                    if (w > 0.0) {
                        ms.an_pred[kk].push_back(ap / w);
                        ms.an_truth[kk].push_back(at / w);
                    }
                }
            }
        }
    }

    auto mean_std = [](const std::vector<double>& v) {
        double m = 0.0;
        for (double x : v) m += x;
        m /= static_cast<double>(v.size());
        double s = 0.0;
        for (double x : v) s += (x - m) * (x - m);
        return std::pair(m, v.size() > 1 ? std::sqrt(s / static_cast<double>(v.size())) : 0.0);
    };

    for (std::size_t mi = 0; mi < masks.size(); ++mi) {
        auto& ms = per_mask[mi];
        SkillReport rep;
        rep.mask_name = masks[mi].name;
        rep.provenance = ar.provenance();
        rep.n_init_dates = static_cast<int>(season_flags.size());
        rep.incidents = incidents;
        for (int v = 0; v < n_vars; ++v) {
            for (int lead = 1; lead <= opt.max_lead; ++lead) {
                const std::size_t kk = key(v, lead);
                if (ms.rmse_m[kk].empty()) continue;
                MetricRow row;
                row.variable = outputs[static_cast<std::size_t>(v)]->name;
                row.lead = lead;
                row.n_init = static_cast<int>(ms.rmse_m[kk].size());
                auto [rm, rs] = mean_std(ms.rmse_m[kk]);
                row.rmse_model = rm;
                row.rmse_model_std = rs;
                row.rmse_clim = mean_std(ms.rmse_c[kk]).first;
                row.rmse_pers = mean_std(ms.rmse_p[kk]).first;
                if (!ms.acc_m[kk].empty()) {
                    auto [am, as] = mean_std(ms.acc_m[kk]);
                    row.acc_model = am;
                    row.acc_model_std = as;
                }
                if (!ms.acc_p[kk].empty()) row.acc_pers = mean_std(ms.acc_p[kk]).first;
                auto rpc_res = ms.rpc[kk].finalize(g, masks[mi]);
                row.rpc = rpc_res.mask_mean;
                row.rpc_defined_cells = rpc_res.defined_cells;
                // Seasonal stratification by init month.
                {
                    std::vector<double> mam, son;
                    for (std::size_t i = 0; i < ms.rmse_m[kk].size(); ++i)
                        (season_flags[i] ? mam : son).push_back(ms.rmse_m[kk][i]);
                    if (!mam.empty()) row.rmse_model_mamjja = mean_std(mam).first;
                    if (!son.empty()) row.rmse_model_sondjf = mean_std(son).first;
                }
                // DM vs climatology at an horizon compatible with the sample.
                const std::int64_t t_count = static_cast<std::int64_t>(ms.rmse_m[kk].size());
                const int h = static_cast<int>(std::min<std::int64_t>(lead, std::max<std::int64_t>(1, t_count / 2 - 1)));
                if (t_count >= 2 * h && t_count >= 2) {
                    DmResult dm = dm_test(ms.rmse_m[kk], ms.rmse_c[kk], h);
                    row.dm_stat_clim = dm.statistic;
                    row.dm_p_clim = dm.p_value;
                }
                rep.rows.push_back(row);
                if (lead == 1 || lead % opt.anomaly_leads_every == 0) {
                    if (!ms.an_pred[kk].empty()) {
                        AnomalyDistributionRow ar_row;
                        ar_row.variable = row.variable;
                        ar_row.lead = lead;
                        ar_row.pred_min = *std::min_element(ms.an_pred[kk].begin(), ms.an_pred[kk].end());
                        ar_row.pred_max = *std::max_element(ms.an_pred[kk].begin(), ms.an_pred[kk].end());
                        ar_row.pred_mean = mean_std(ms.an_pred[kk]).first;
                        ar_row.truth_min = *std::min_element(ms.an_truth[kk].begin(), ms.an_truth[kk].end());
                        ar_row.truth_max = *std::max_element(ms.an_truth[kk].begin(), ms.an_truth[kk].end());
                        ar_row.truth_mean = mean_std(ms.an_truth[kk]).first;
                        rep.anomalies.push_back(ar_row);
                    }
                }
            }
        }
        reports.push_back(std::move(rep));
    }
    return reports;
}

inline std::vector<SkillReport> rollout_evaluate(const CrossFormerNet& net, const ModelRuntime& rt,
                                                 const Archive& ar, const VariableCatalog& catalog,
                                                 const std::vector<int>& test_years,
                                                 const std::vector<RegionMask>& masks,
                                                 const EvalOptions& opt) {
    return rollout_evaluate(
        [&](const Date& init, int leads) { return run_rollout(net, rt, ar, catalog, init, leads); }, ar,
        catalog, test_years, masks, opt);
}

// ---------------------------------------------------------------------------
// Scorecard export
// ---------------------------------------------------------------------------

namespace detail_eval {

inline std::string opt_str(const std::optional<double>& v) {
    return v ? grd1::fmt_g17(*v) : "na";
}

// Percent improvement: positive is better than the baseline.
inline std::string improvement(double model, double baseline, bool lower_is_better) {
    if (baseline == 0.0) return "na";
    const double pct = lower_is_better ? 100.0 * (baseline - model) / baseline
                                       : 100.0 * (model - baseline) / baseline;
    return grd1::fmt_g17(pct);
}

}  // namespace detail_eval

inline void scorecard_export(const SkillReport& rep, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    const std::string tag = rep.mask_name;
    {
        std::ofstream f(dir / ("scorecard_rmse_" + tag + ".tsv"));
        f << "# " << rep.provenance.to_line() << " mask=" << tag << " weighting=" << rep.weighting
          << " n_init=" << rep.n_init_dates << "\n";
        f << "variable\tlead\tn_init\trmse_model\trmse_std\trmse_climatology\trmse_persistence\t"
             "improve_vs_climatology_pct\timprove_vs_persistence_pct\trmse_mamjja\trmse_sondjf\t"
             "dm_stat_vs_clim\tdm_p_vs_clim\n";
        for (const auto& r : rep.rows) {
            f << r.variable << "\t" << r.lead << "\t" << r.n_init << "\t" << grd1::fmt_g17(r.rmse_model)
              << "\t" << grd1::fmt_g17(r.rmse_model_std) << "\t" << grd1::fmt_g17(r.rmse_clim) << "\t"
              << grd1::fmt_g17(r.rmse_pers) << "\t"
              << detail_eval::improvement(r.rmse_model, r.rmse_clim, true) << "\t"
              << detail_eval::improvement(r.rmse_model, r.rmse_pers, true) << "\t"
              << detail_eval::opt_str(r.rmse_model_mamjja) << "\t"
              << detail_eval::opt_str(r.rmse_model_sondjf) << "\t" << detail_eval::opt_str(r.dm_stat_clim)
              << "\t" << detail_eval::opt_str(r.dm_p_clim) << "\n";
        }
    }
    {
        std::ofstream f(dir / ("scorecard_acc_" + tag + ".tsv"));
        f << "# " << rep.provenance.to_line() << " mask=" << tag << " n_init=" << rep.n_init_dates << "\n";
        f << "variable\tlead\tacc_model\tacc_std\tacc_persistence\timprove_vs_persistence_pct\trpc\t"
             "rpc_defined_cells\n";
        for (const auto& r : rep.rows) {
            std::string imp = "na";
            if (r.acc_model && r.acc_pers && *r.acc_pers != 0.0)
                imp = detail_eval::improvement(*r.acc_model, *r.acc_pers, false);
            f << r.variable << "\t" << r.lead << "\t" << detail_eval::opt_str(r.acc_model) << "\t"
              << detail_eval::opt_str(r.acc_model_std) << "\t" << detail_eval::opt_str(r.acc_pers) << "\t"
              << imp << "\t" << detail_eval::opt_str(r.rpc) << "\t" << r.rpc_defined_cells << "\n";
        }
    }
    {
        std::ofstream f(dir / ("anomaly_distribution_" + tag + ".tsv"));
        f << "# " << rep.provenance.to_line() << " mask=" << tag << "\n";
        f << "variable\tlead\tpred_min\tpred_mean\tpred_max\ttruth_min\ttruth_mean\ttruth_max\n";
        for (const auto& a : rep.anomalies)
            f << a.variable << "\t" << a.lead << "\t" << grd1::fmt_g17(a.pred_min) << "\t"
              << grd1::fmt_g17(a.pred_mean) << "\t" << grd1::fmt_g17(a.pred_max) << "\t"
              << grd1::fmt_g17(a.truth_min) << "\t" << grd1::fmt_g17(a.truth_mean) << "\t"
              << grd1::fmt_g17(a.truth_max) << "\n";
    }
    if (!rep.incidents.empty()) {
        std::ofstream f(dir / ("incidents_" + tag + ".txt"));
        for (const auto& s : rep.incidents) f << s << "\n";
    }
}

// Re-parse a scorecard RMSE table (round-trip checks).
inline std::vector<std::vector<std::string>> parse_tsv(const std::filesystem::path& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("cannot read " + path.string());
    std::vector<std::vector<std::string>> rows;
    std::string line;
    while (std::getline(f, line)) {
        if (line.empty() || line[0] == '#') continue;
        std::vector<std::string> cols;
        std::istringstream is(line);
        std::string cell;
        while (std::getline(is, cell, '\t')) cols.push_back(cell);
        rows.push_back(std::move(cols));
    }
    return rows;
}

}  // namespace droughtcast
