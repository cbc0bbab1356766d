#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "droughtcast/physics.hpp"
#include "testutil.hpp"

using namespace droughtcast;
using dctest::check_gradients;
using dctest::random_tensor;

namespace {

const VariableCatalog& cat() {
    static VariableCatalog c = VariableCatalog::standard();
    return c;
}

// Positive random output stack (keeps the clamp inactive and values away from
// subgradient kinks).
Tensor random_state(const GridSpec& g, std::mt19937_64& rng) {
    return random_tensor({cat().n_outputs(), g.n_lat, g.n_lon}, rng, 0.5, 2.0);
}

void set_channel(Tensor& state, const std::string& var, const std::vector<double>& values) {
    const int c = cat().output_channel(var);
    const std::size_t per = state.numel() / static_cast<std::size_t>(state.dim(0));
    ASSERT_EQ(values.size(), per);
    for (std::size_t i = 0; i < per; ++i)
        state.mutable_values()[static_cast<std::size_t>(c) * per + i] = values[i];
}

std::vector<double> get_channel(const Tensor& state, const std::string& var) {
    const int c = cat().output_channel(var);
    const std::size_t per = state.numel() / static_cast<std::size_t>(state.dim(0));
    return std::vector<double>(state.values().begin() + static_cast<std::ptrdiff_t>(c * per),
                               state.values().begin() + static_cast<std::ptrdiff_t>((c + 1) * per));
}

// q500 value that yields the requested column moisture with q200 = 0.
double q500_for_moisture(double mw) { return mw * kGravity / kQtotWeight500; }

// Independent budget oracle: direct area-weighted recomputation.
double moisture_residual_oracle(const Tensor& prev, const Tensor& pred, const GridSpec& g) {
    auto mw = [&](const Tensor& s, std::size_t i) {
        const std::size_t per = s.numel() / static_cast<std::size_t>(s.dim(0));
        const double q5 = s[static_cast<std::size_t>(cat().output_channel("qtot500")) * per + i];
        const double q2 = s[static_cast<std::size_t>(cat().output_channel("qtot200")) * per + i];
        return (kQtotWeight500 * q5 + kQtotWeight200 * q2) / kGravity;
    };
    const std::size_t per = g.cells();
    double acc = 0.0, wsum = 0.0;
    const std::vector<double> w = g.cell_weights();
    for (std::size_t i = 0; i < per; ++i) {
        const double e = pred[static_cast<std::size_t>(cat().output_channel("evap")) * per + i];
        const double p = pred[static_cast<std::size_t>(cat().output_channel("precip1d")) * per + i];
        acc += w[i] * (mw(pred, i) - mw(prev, i) - e + p);
        wsum += w[i];
    }
    return acc / wsum;
}

double dry_mass_residual_oracle(const Tensor& prev, const Tensor& pred, const GridSpec& g) {
    auto pdry = [&](const Tensor& s, std::size_t i) {
        const std::size_t per = s.numel() / static_cast<std::size_t>(s.dim(0));
        const double q5 = s[static_cast<std::size_t>(cat().output_channel("qtot500")) * per + i];
        const double q2 = s[static_cast<std::size_t>(cat().output_channel("qtot200")) * per + i];
        const double sp = s[static_cast<std::size_t>(cat().output_channel("sp")) * per + i];
        return sp - (kQtotWeight500 * q5 + kQtotWeight200 * q2);
    };
    double acc = 0.0, wsum = 0.0;
    const std::vector<double> w = g.cell_weights();
    for (std::size_t i = 0; i < g.cells(); ++i) {
        acc += w[i] * (pdry(pred, i) - pdry(prev, i));
        wsum += w[i];
    }
    return acc / wsum;
}

}  // namespace

// ---------------------------------------------------------------------------
// clamp_nonnegative
// ---------------------------------------------------------------------------

TEST(Clamp, NegativePrecipitationZeroed) {
    GridSpec g = GridSpec::regular(1, 2);
    Tensor state = Tensor::zeros({cat().n_outputs(), 1, 2});
    set_channel(state, "precip1d", {-1.0, 0.5});
    Tensor out = clamp_nonnegative(state, cat());
    EXPECT_EQ(get_channel(out, "precip1d"), (std::vector<double>{0.0, 0.5}));
}

TEST(Clamp, NonNegativeStateIsFixedPoint) {
    GridSpec g = GridSpec::regular(2, 3);
    std::mt19937_64 rng(1);
    Tensor state = random_state(g, rng);
    Tensor out = clamp_nonnegative(state, cat());
    for (std::size_t i = 0; i < state.numel(); ++i) EXPECT_DOUBLE_EQ(out[i], state[i]);
}

TEST(Clamp, ColdTemperatureNotFlagged) {
    Tensor state = Tensor::zeros({cat().n_outputs(), 1, 1});
    set_channel(state, "t2m", {-5.0});
    Tensor out = clamp_nonnegative(state, cat());
    EXPECT_EQ(get_channel(out, "t2m"), (std::vector<double>{-5.0}));
}

TEST(Clamp, RejectsChannelMismatch) {
    EXPECT_THROW(clamp_nonnegative(Tensor::zeros({5, 2, 2}), cat()), std::invalid_argument);
}

// ---------------------------------------------------------------------------
// conserve_moisture
// ---------------------------------------------------------------------------

TEST(Moisture, ClosedBudgetIsFixedPoint) {
    GridSpec g = GridSpec::regular(1, 2);
    Tensor prev = Tensor::zeros({cat().n_outputs(), 1, 2});
    Tensor pred = Tensor::zeros({cat().n_outputs(), 1, 2});
    // dM = 0, E = 2, P = 2 everywhere: already closed.
    set_channel(prev, "qtot500", {q500_for_moisture(10), q500_for_moisture(10)});
    set_channel(pred, "qtot500", {q500_for_moisture(10), q500_for_moisture(10)});
    set_channel(pred, "evap", {2, 2});
    set_channel(pred, "precip1d", {2, 2});
    auto [out, rep] = conserve_moisture(prev, pred, cat(), g);
    EXPECT_DOUBLE_EQ(rep.scale_applied, 1.0);
    EXPECT_FALSE(rep.clamped);
    EXPECT_EQ(get_channel(out, "precip1d"), (std::vector<double>{2, 2}));
    EXPECT_NEAR(rep.post_residual, 0.0, 1e-14);
}

TEST(Moisture, TwoCellWorkedExample) {
    GridSpec g = GridSpec::regular(1, 2);  // equal-area cells
    Tensor prev = Tensor::zeros({cat().n_outputs(), 1, 2});
    Tensor pred = Tensor::zeros({cat().n_outputs(), 1, 2});
    set_channel(prev, "qtot500", {q500_for_moisture(10), q500_for_moisture(10)});
    set_channel(pred, "qtot500", {q500_for_moisture(10), q500_for_moisture(12)});
    set_channel(pred, "evap", {2, 2});
    set_channel(pred, "precip1d", {1, 3});
    auto [out, rep] = conserve_moisture(prev, pred, cat(), g);
    EXPECT_NEAR(rep.scale_applied, 0.5, 1e-12);
    const auto p = get_channel(out, "precip1d");
    EXPECT_NEAR(p[0], 0.5, 1e-12);
    EXPECT_NEAR(p[1], 1.5, 1e-12);
    EXPECT_NEAR(rep.post_residual, 0.0, 1e-12);
    EXPECT_NEAR(moisture_residual_oracle(prev, out, g), 0.0, 1e-12);
}

TEST(Moisture, ZeroPrecipZeroSinkIsNoop) {
    GridSpec g = GridSpec::regular(1, 2);
    Tensor prev = Tensor::zeros({cat().n_outputs(), 1, 2});
    Tensor pred = Tensor::zeros({cat().n_outputs(), 1, 2});
    // E = 0, dM = 0, P = 0: vacuous correction.
    auto [out, rep] = conserve_moisture(prev, pred, cat(), g);
    EXPECT_FALSE(rep.degenerate);
    EXPECT_NEAR(rep.post_residual, 0.0, 1e-14);
}

TEST(Moisture, ZeroPrecipNonzeroSinkFlagged) {
    GridSpec g = GridSpec::regular(1, 2);
    Tensor prev = Tensor::zeros({cat().n_outputs(), 1, 2});
    Tensor pred = Tensor::zeros({cat().n_outputs(), 1, 2});
    set_channel(pred, "evap", {3, 3});  // required sink with no precipitation
    auto [out, rep] = conserve_moisture(prev, pred, cat(), g);
    EXPECT_TRUE(rep.degenerate);
    EXPECT_EQ(get_channel(out, "precip1d"), (std::vector<double>{0, 0}));
}

TEST(Moisture, ScaleClampedAndFlagged) {
    GridSpec g = GridSpec::regular(1, 2);
    Tensor prev = Tensor::zeros({cat().n_outputs(), 1, 2});
    Tensor pred = Tensor::zeros({cat().n_outputs(), 1, 2});
    set_channel(pred, "evap", {50, 50});
    set_channel(pred, "precip1d", {1, 1});  // demands r = 50 > r_max
    auto [out, rep] = conserve_moisture(prev, pred, cat(), g, /*r_max=*/10.0);
    EXPECT_TRUE(rep.clamped);
    EXPECT_DOUBLE_EQ(rep.scale_applied, 10.0);
    EXPECT_EQ(get_channel(out, "precip1d"), (std::vector<double>{10, 10}));
}

TEST(Moisture, NeverProducesNegativePrecipitation) {
    GridSpec g = GridSpec::regular(2, 2);
    std::mt19937_64 rng(2);
    for (int trial = 0; trial < 20; ++trial) {
        Tensor prev = random_state(g, rng);
        Tensor pred = random_state(g, rng);
        auto [out, rep] = conserve_moisture(prev, pred, cat(), g);
        EXPECT_GE(rep.scale_applied, 0.0);
        for (double p : get_channel(out, "precip1d")) EXPECT_GE(p, 0.0);
    }
}

// ---------------------------------------------------------------------------
// conserve_dry_mass
// ---------------------------------------------------------------------------

TEST(DryMass, EqualMeansGiveZeroOffset) {
    GridSpec g = GridSpec::regular(1, 2);
    std::mt19937_64 rng(3);
    Tensor prev = random_state(g, rng);
    Tensor pred = prev.detach();
    auto [out, rep] = conserve_dry_mass(prev, pred, cat(), g);
    EXPECT_NEAR(rep.offset_applied, 0.0, 1e-9);
}

TEST(DryMass, TwoCellWorkedExample) {
    GridSpec g = GridSpec::regular(1, 2);
    Tensor prev = Tensor::zeros({cat().n_outputs(), 1, 2});
    Tensor pred = Tensor::zeros({cat().n_outputs(), 1, 2});
    // q = 0 so p_dry = sp. prev mean 1000 hPa, pred mean 998 hPa.
    set_channel(prev, "sp", {100000, 100000});
    set_channel(pred, "sp", {99800, 99800});
    auto [out, rep] = conserve_dry_mass(prev, pred, cat(), g);
    EXPECT_NEAR(rep.offset_applied, 200.0, 1e-9);
    EXPECT_EQ(get_channel(out, "sp"), (std::vector<double>{100000, 100000}));
    EXPECT_NEAR(rep.post_residual, 0.0, 1e-9);
}

TEST(DryMass, ConstantGridsGlobalEqualsLocal) {
    GridSpec g = GridSpec::regular(2, 3);
    Tensor prev = Tensor::zeros({cat().n_outputs(), 2, 3});
    Tensor pred = Tensor::zeros({cat().n_outputs(), 2, 3});
    set_channel(prev, "sp", std::vector<double>(6, 101000.0));
    set_channel(pred, "sp", std::vector<double>(6, 100500.0));
    auto [out, rep] = conserve_dry_mass(prev, pred, cat(), g);
    for (double v : get_channel(out, "sp")) EXPECT_NEAR(v, 101000.0, 1e-9);
}

// ---------------------------------------------------------------------------
// apply_constraints
// ---------------------------------------------------------------------------

TEST(ApplyConstraints, AllOffIsIdentity) {
    GridSpec g = GridSpec::regular(2, 2);
    std::mt19937_64 rng(4);
    Tensor prev = random_state(g, rng);
    Tensor pred = random_state(g, rng);
    ConstraintToggles off;
    off.clamp = off.moisture = off.dry_mass = false;
    auto [out, reps] = apply_constraints(prev, pred, cat(), g, off);
    EXPECT_TRUE(reps.empty());
    for (std::size_t i = 0; i < pred.numel(); ++i) EXPECT_DOUBLE_EQ(out[i], pred[i]);
}

TEST(ApplyConstraints, SingleTogglesMatchIndividualOps) {
    GridSpec g = GridSpec::regular(2, 2);
    std::mt19937_64 rng(5);
    Tensor prev = random_state(g, rng);
    Tensor pred = random_state(g, rng);
    {
        ConstraintToggles t;
        t.clamp = true;
        t.moisture = t.dry_mass = false;
        auto [out, reps] = apply_constraints(prev, pred, cat(), g, t);
        Tensor ref = clamp_nonnegative(pred, cat());
        for (std::size_t i = 0; i < ref.numel(); ++i) EXPECT_DOUBLE_EQ(out[i], ref[i]);
    }
    {
        ConstraintToggles t;
        t.clamp = false;
        t.moisture = true;
        t.dry_mass = false;
        auto [out, reps] = apply_constraints(prev, pred, cat(), g, t);
        auto [ref, rep2] = conserve_moisture(prev, pred, cat(), g, t.r_max);
        for (std::size_t i = 0; i < ref.numel(); ++i) EXPECT_DOUBLE_EQ(out[i], ref[i]);
    }
    {
        ConstraintToggles t;
        t.clamp = false;
        t.moisture = false;
        t.dry_mass = true;
        auto [out, reps] = apply_constraints(prev, pred, cat(), g, t);
        auto [ref, rep2] = conserve_dry_mass(prev, pred, cat(), g);
        for (std::size_t i = 0; i < ref.numel(); ++i) EXPECT_DOUBLE_EQ(out[i], ref[i]);
    }
}

TEST(ApplyConstraints, RandomStatesCloseBothBudgets) {
    GridSpec g = GridSpec::regular(4, 8);
    std::mt19937_64 rng(6);
    ConstraintToggles t;
    for (int trial = 0; trial < 100; ++trial) {
        Tensor prev = random_state(g, rng);
        Tensor pred = random_state(g, rng);
        auto [out, reps] = apply_constraints(prev, pred, cat(), g, t);
        ASSERT_EQ(reps.size(), 2u);
        if (!reps[0].clamped && !reps[0].degenerate) {
            // Relative to the field scale (values are O(1)).
            EXPECT_LT(std::abs(moisture_residual_oracle(prev, out, g)), 1e-10);
        }
        EXPECT_LT(std::abs(dry_mass_residual_oracle(prev, out, g)), 1e-9 * 1e5);
        for (double p : get_channel(out, "precip1d")) EXPECT_GE(p, 0.0);
    }
}

TEST(ApplyConstraints, Idempotent) {
    GridSpec g = GridSpec::regular(2, 4);
    std::mt19937_64 rng(7);
    ConstraintToggles t;
    Tensor prev = random_state(g, rng);
    Tensor pred = random_state(g, rng);
    auto [once, r1] = apply_constraints(prev, pred, cat(), g, t);
    auto [twice, r2] = apply_constraints(prev, once, cat(), g, t);
    for (std::size_t i = 0; i < once.numel(); ++i) EXPECT_NEAR(twice[i], once[i], 1e-9);
    EXPECT_NEAR(r2[0].scale_applied, 1.0, 1e-10);
    EXPECT_NEAR(r2[1].offset_applied, 0.0, 1e-7);
}

TEST(ApplyConstraints, ClampFirstOrderClosesBudgetWithNegativeInputs) {
    // Negative raw precipitation must be clamped before the global rescale,
    // otherwise the closure could assign negative rain.
    GridSpec g = GridSpec::regular(1, 2);
    Tensor prev = Tensor::zeros({cat().n_outputs(), 1, 2});
    Tensor pred = Tensor::zeros({cat().n_outputs(), 1, 2});
    set_channel(pred, "evap", {2, 2});
    set_channel(pred, "precip1d", {-1, 3});
    ConstraintToggles t;
    t.dry_mass = false;
    auto [out, reps] = apply_constraints(prev, pred, cat(), g, t);
    const auto p = get_channel(out, "precip1d");
    EXPECT_GE(p[0], 0.0);
    EXPECT_GE(p[1], 0.0);
    // After clamping, P = [0, 3], mean 1.5, required 2 -> r = 4/3.
    EXPECT_NEAR(reps[0].scale_applied, 4.0 / 3.0, 1e-12);
    EXPECT_NEAR(moisture_residual_oracle(prev, out, g), 0.0, 1e-12);
}

TEST(ApplyConstraints, UnconstrainedChannelMeansUntouched) {
    GridSpec g = GridSpec::regular(2, 2);
    std::mt19937_64 rng(8);
    Tensor prev = random_state(g, rng);
    Tensor pred = random_state(g, rng);
    ConstraintToggles t;
    auto [out, reps] = apply_constraints(prev, pred, cat(), g, t);
    for (const std::string var : {"t2m", "td2m", "u500", "z200", "sm1", "ndvi"}) {
        EXPECT_EQ(get_channel(out, var), get_channel(pred, var)) << var;
    }
}

TEST(ApplyConstraints, DifferentiableThroughCorrections) {
    GridSpec g = GridSpec::regular(1, 2);
    std::mt19937_64 rng(9);
    Tensor prev = random_state(g, rng);
    Tensor pred = random_state(g, rng);
    ConstraintToggles t;
    check_gradients(
        [&]() {
            auto [out, reps] = apply_constraints(prev, pred, cat(), g, t);
            return dctest::weighted_sum(out);
        },
        {pred}, 1e-4, 1e-6, 8);
}

TEST(BudgetReport, SerializesToOneLine) {
    BudgetReport rep;
    rep.budget = "moisture";
    rep.pre_residual = 0.5;
    rep.post_residual = 0.0;
    rep.scale_applied = 0.75;
    const std::string line = rep.to_line();
    EXPECT_NE(line.find("budget moisture"), std::string::npos);
    EXPECT_NE(line.find("scale=0.75"), std::string::npos);
    EXPECT_EQ(line.find('\n'), std::string::npos);
}
