#pragma once

// Post-prediction corrections: non-negativity clamping and global budget
// closures for column moisture and dry air mass. All corrections are built
// from differentiable tensor ops so they can sit between the network forward
// and the loss during training.
//
// Column moisture per cell uses the two available q_tot levels with fixed
// pressure-thickness weights (400 hPa for the 500 mb level, 250 hPa for the
// 200 mb level): M_w = (dp500 * q500 + dp200 * q200) / g, in kg m-2 (= mm).
//
// Moisture closure rescales precipitation by
//   r = (<E> - <dM_w>/dt) / <P_raw>,   clamped to [0, r_max],
// so that <dM_w/dt - E + P'> = 0 exactly when unclamped. Dry-mass closure
// adds a uniform offset to surface pressure so the area mean of
// p_dry = p_s - g * M_w matches the previous step.

#include <cmath>
#include <string>
#include <vector>

#include "droughtcast/catalog.hpp"
#include "droughtcast/grid.hpp"
#include "droughtcast/tensor.hpp"

namespace droughtcast {

constexpr double kGravity = 9.80665;        // m s-2
constexpr double kQtotWeight500 = 40000.0;  // Pa of pressure thickness
constexpr double kQtotWeight200 = 25000.0;  // Pa

struct BudgetReport {
    std::string budget;          // "moisture" | "dry_mass"
    double pre_residual = 0.0;   // budget units per day before correction
    double post_residual = 0.0;  // after correction
    double scale_applied = 1.0;  // precipitation scale factor r
    double offset_applied = 0.0; // surface pressure offset, Pa
    bool clamped = false;        // r hit [0, r_max]
    bool degenerate = false;     // zero-precipitation state with nonzero sink

    std::string to_line() const {
        char buf[256];
        std::snprintf(buf, sizeof(buf),
                      "budget %s pre=%.17g post=%.17g scale=%.17g offset=%.17g clamped=%d degenerate=%d",
                      budget.c_str(), pre_residual, post_residual, scale_applied, offset_applied,
                      clamped ? 1 : 0, degenerate ? 1 : 0);
        return buf;
    }
};

struct ConstraintToggles {
    bool clamp = true;
    bool moisture = true;
    bool dry_mass = true;
    double r_max = 10.0;
};

namespace detail_physics {

// Column moisture field [H,W] from a state whose leading channels follow the
// prognostic ordering of the standard catalog.
inline Tensor column_moisture(const Tensor& state, const VariableCatalog& catalog) {
    const int q500 = catalog.output_channel("qtot500");
    const int q200 = catalog.output_channel("qtot200");
    Tensor a = slice_channels(state, q500, q500 + 1);
    Tensor b = slice_channels(state, q200, q200 + 1);
    return add(scale(a, kQtotWeight500 / kGravity), scale(b, kQtotWeight200 / kGravity));
}

inline Tensor replace_channel(const Tensor& state, int channel, const Tensor& field) {
    std::vector<Tensor> parts;
    if (channel > 0) parts.push_back(slice_channels(state, 0, channel));
    parts.push_back(field);
    if (channel + 1 < state.dim(0)) parts.push_back(slice_channels(state, channel + 1, state.dim(0)));
    return concat_channels(parts);
}

}  // namespace detail_physics

// Zeroes negatives on channels the catalog flags non-negative. Other channels
// are untouched. The state is an output stack [n_outputs, H, W].
inline Tensor clamp_nonnegative(const Tensor& state, const VariableCatalog& catalog) {
    if (state.dim(0) != catalog.n_outputs())
        throw std::invalid_argument("clamp_nonnegative: channel count mismatch with catalog");
    return clamp_min0_channels(state, catalog.output_nonneg_flags());
}

// prev_state needs only the prognostic channels (they share indices with the
// output stack); pred_state is the full output stack.
inline std::pair<Tensor, BudgetReport> conserve_moisture(const Tensor& prev_state,
                                                         const Tensor& pred_state,
                                                         const VariableCatalog& catalog,
                                                         const GridSpec& grid,
                                                         double r_max = 10.0, double dt = 1.0) {
    BudgetReport rep;
    rep.budget = "moisture";
    const std::vector<double> w = grid.cell_weights();

    Tensor mw_prev = detail_physics::column_moisture(prev_state, catalog);
    Tensor mw_pred = detail_physics::column_moisture(pred_state, catalog);
    Tensor dM = scale(sub(mw_pred, mw_prev), 1.0 / dt);

    const int c_evap = catalog.output_channel("evap");
    const int c_precip = catalog.output_channel("precip1d");
    Tensor evap = slice_channels(pred_state, c_evap, c_evap + 1);
    Tensor precip = scale(slice_channels(pred_state, c_precip, c_precip + 1), 1.0 / dt);

    Tensor mean_dM = weighted_mean(dM, w);
    Tensor mean_E = weighted_mean(evap, w);
    Tensor mean_P = weighted_mean(precip, w);

    rep.pre_residual = mean_dM.item() - mean_E.item() + mean_P.item();

    const double p_bar = mean_P.item();
    const double required = mean_E.item() - mean_dM.item();
    const double tiny = 1e-15;
    if (std::abs(p_bar) < tiny) {
        // Nothing to rescale. Zero required sink means the budget is already
        // closed; otherwise flag and leave the state untouched.
        rep.scale_applied = 1.0;
        rep.degenerate = std::abs(required) >= 1e-12;
        rep.post_residual = rep.pre_residual;
        return {pred_state, rep};
    }

    Tensor r_raw = scale_by(sub(mean_E, mean_dM), reciprocal(mean_P));
    Tensor r = clamp_scalar(r_raw, 0.0, r_max);
    rep.scale_applied = r.item();
    rep.clamped = r.item() != r_raw.item();

    Tensor precip_new = scale_by(slice_channels(pred_state, c_precip, c_precip + 1), r);
    Tensor out = detail_physics::replace_channel(pred_state, c_precip, precip_new);

    const double new_p = area_mean(precip_new.values(), grid) / dt;
    rep.post_residual = mean_dM.item() - mean_E.item() + new_p;
    return {out, rep};
}

inline std::pair<Tensor, BudgetReport> conserve_dry_mass(const Tensor& prev_state,
                                                         const Tensor& pred_state,
                                                         const VariableCatalog& catalog,
                                                         const GridSpec& grid) {
    BudgetReport rep;
    rep.budget = "dry_mass";
    const std::vector<double> w = grid.cell_weights();
    const int c_sp = catalog.output_channel("sp");

    auto p_dry = [&](const Tensor& state) {
        Tensor sp = slice_channels(state, c_sp, c_sp + 1);
        Tensor mw = detail_physics::column_moisture(state, catalog);
        return sub(sp, scale(mw, kGravity));
    };
    Tensor mean_prev = weighted_mean(p_dry(prev_state), w);
    Tensor mean_pred = weighted_mean(p_dry(pred_state), w);
    Tensor delta = sub(mean_prev, mean_pred);
    rep.pre_residual = -delta.item();
    rep.offset_applied = delta.item();

    Tensor sp_new = shift_by(slice_channels(pred_state, c_sp, c_sp + 1), delta);
    Tensor out = detail_physics::replace_channel(pred_state, c_sp, sp_new);

    Tensor mw = detail_physics::column_moisture(out, catalog);
    Tensor sp2 = slice_channels(out, c_sp, c_sp + 1);
    rep.post_residual = area_mean(sub(sp2, scale(mw, kGravity)).values(), grid) - mean_prev.item();
    return {out, rep};
}

// Clamp, then moisture, then dry mass; tests assert this order closes both
// budgets (clamping after rescaling could reopen them).
inline std::pair<Tensor, std::vector<BudgetReport>> apply_constraints(
    const Tensor& prev_state, const Tensor& pred_state, const VariableCatalog& catalog,
    const GridSpec& grid, const ConstraintToggles& toggles) {
    Tensor state = pred_state;
    std::vector<BudgetReport> reports;
    if (toggles.clamp) state = clamp_nonnegative(state, catalog);
    if (toggles.moisture) {
        auto [s, rep] = conserve_moisture(prev_state, state, catalog, grid, toggles.r_max);
        state = s;
        reports.push_back(rep);
    }
    if (toggles.dry_mass) {
        auto [s, rep] = conserve_dry_mass(prev_state, state, catalog, grid);
        state = s;
        reports.push_back(rep);
    }
    return {state, reports};
}

}  // namespace droughtcast
