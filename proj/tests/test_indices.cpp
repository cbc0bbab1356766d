#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <random>

#include "droughtcast/forecast.hpp"
#include "droughtcast/indices.hpp"
#include "droughtcast/pipeline.hpp"
#include "testutil.hpp"

using namespace droughtcast;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& tag) {
    fs::path p = fs::path(::testing::TempDir()) / ("dc_indices_" + tag);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

// In-memory climatology view for unit tests.
struct OwnedClim {
    std::shared_ptr<std::vector<float>> mean, stdd;
    ClimatologyView view;

    OwnedClim(std::size_t cells, const std::function<double(int, std::size_t)>& mean_fn,
              const std::function<double(int, std::size_t)>& std_fn) {
        mean = std::make_shared<std::vector<float>>(366 * cells);
        stdd = std::make_shared<std::vector<float>>(366 * cells);
        for (int slot = 1; slot <= 366; ++slot)
            for (std::size_t c = 0; c < cells; ++c) {
                (*mean)[static_cast<std::size_t>(slot - 1) * cells + c] = static_cast<float>(mean_fn(slot, c));
                (*stdd)[static_cast<std::size_t>(slot - 1) * cells + c] = static_cast<float>(std_fn(slot, c));
            }
        view.mean = mean;
        view.stdd = stdd;
        view.cells = cells;
    }
};

}  // namespace

// ---------------------------------------------------------------------------
// anomaly
// ---------------------------------------------------------------------------

TEST(Anomaly, ClimatologyMeanGivesZeros) {
    OwnedClim clim(4, [](int, std::size_t c) { return 1.0 + c; }, [](int, std::size_t) { return 1.0; });
    std::vector<double> field = {1, 2, 3, 4};
    const auto a = anomaly(field, clim.view, Date{2020, 6, 1});
    for (double v : a) EXPECT_NEAR(v, 0.0, 1e-12);
}

TEST(Anomaly, UniformShift) {
    OwnedClim clim(4, [](int, std::size_t c) { return 1.0 + c; }, [](int, std::size_t) { return 1.0; });
    std::vector<double> field = {4, 5, 6, 7};
    const auto a = anomaly(field, clim.view, Date{2020, 6, 1});
    for (double v : a) EXPECT_NEAR(v, 3.0, 1e-12);
}

TEST(Anomaly, MatchesDirectSubtraction) {
    std::mt19937_64 rng(1);
    std::uniform_real_distribution<double> uni(-2, 2);
    OwnedClim clim(8, [](int slot, std::size_t c) { return 0.1 * slot + static_cast<double>(c); },
                   [](int, std::size_t) { return 1.0; });
    std::vector<double> field(8);
    for (auto& v : field) v = uni(rng);
    const Date d{2021, 3, 14};
    const auto a = anomaly(field, clim.view, d);
    const int slot = climatology_slot(d);
    for (std::size_t c = 0; c < 8; ++c)
        EXPECT_NEAR(a[c], field[c] - (0.1 * slot + static_cast<double>(c)), 1e-5);
}

// ---------------------------------------------------------------------------
// ESR / SESR
// ---------------------------------------------------------------------------

TEST(Esr, BasicRatiosAndSingularity) {
    const auto r = esr({2.0, 0.0, 1.0}, {2.0, 3.0, 0.0});
    EXPECT_NEAR(r[0], 1.0, 1e-15);  // ET = PET
    EXPECT_NEAR(r[1], 0.0, 1e-15);  // ET = 0
    EXPECT_TRUE(is_missing(r[2]));  // PET = 0 -> missing
}

TEST(Esr, SubEpsilonPetFlagged) {
    const auto r = esr({1.0}, {5e-7});
    EXPECT_TRUE(is_missing(r[0]));
}

TEST(Sesr, StandardizationPoints) {
    OwnedClim clim(2, [](int, std::size_t) { return 0.5; }, [](int, std::size_t) { return 0.1; });
    const Date d{2020, 7, 1};
    const auto z0 = sesr({0.5, 0.5}, clim.view, d);
    EXPECT_NEAR(z0[0], 0.0, 1e-6);
    const auto z1 = sesr({0.6, 0.6}, clim.view, d);
    EXPECT_NEAR(z1[0], 1.0, 1e-5);  // one standard deviation
}

TEST(Sesr, VanishedSigmaFlagged) {
    OwnedClim clim(1, [](int, std::size_t) { return 0.5; }, [](int, std::size_t) { return 0.0; });
    const auto z = sesr({0.7}, clim.view, Date{2020, 7, 1});
    EXPECT_TRUE(is_missing(z[0]));
}

TEST(Sesr, InvariantUnderCommonPositiveRescaling) {
    // ESR = ET/PET is unchanged when both ET and PET scale together, so SESR
    // against the same pool is too.
    const std::vector<double> et = {1.2, 0.8}, pet = {3.0, 2.0};
    const auto r1 = esr(et, pet);
    std::vector<double> et2 = et, pet2 = pet;
    for (auto& v : et2) v *= 7.5;
    for (auto& v : pet2) v *= 7.5;
    const auto r2 = esr(et2, pet2);
    for (std::size_t i = 0; i < r1.size(); ++i) EXPECT_NEAR(r1[i], r2[i], 1e-12);
}

// ---------------------------------------------------------------------------
// percentiles
// ---------------------------------------------------------------------------

TEST(SmPercentile, MedianAndExtremes) {
    const std::vector<double> pool = {1, 2, 3, 4, 5};  // odd N
    EXPECT_NEAR(sm_percentile(3.0, pool), 50.0, 1e-12);
    EXPECT_NEAR(sm_percentile(0.5, pool), 100.0 / 6.0, 1e-12);  // rank 1
    EXPECT_NEAR(sm_percentile(9.0, pool), 100.0, 1e-12);
}

TEST(SmPercentile, MatchesSortAndCountOracle) {
    std::mt19937_64 rng(2);
    std::uniform_real_distribution<double> uni(0, 10);
    std::vector<double> pool(101);
    for (auto& v : pool) v = uni(rng);
    for (int q = 0; q < 50; ++q) {
        const double x = uni(rng);
        std::size_t below = 0;
        for (double p : pool)
            if (p < x) ++below;
        EXPECT_NEAR(sm_percentile(x, pool), 100.0 * (below + 1) / 102.0, 1e-12);
    }
}

TEST(SmPercentile, MonotoneInQuery) {
    std::mt19937_64 rng(3);
    std::uniform_real_distribution<double> uni(0, 10);
    std::vector<double> pool(50);
    for (auto& v : pool) v = uni(rng);
    double prev = -1.0;
    for (double x = 0.0; x <= 10.0; x += 0.25) {
        const double p = sm_percentile(x, pool);
        EXPECT_GE(p, prev);
        prev = p;
    }
}

// ---------------------------------------------------------------------------
// pentads
// ---------------------------------------------------------------------------

TEST(Pentads, ConstantAndArithmetic) {
    const std::vector<double> constant(20, 2.5);
    for (double v : pentad_aggregate(constant)) EXPECT_DOUBLE_EQ(v, 2.5);
    std::vector<double> days;
    for (int i = 1; i <= 10; ++i) days.push_back(i);
    EXPECT_EQ(pentad_aggregate(days), (std::vector<double>{3, 8}));
}

TEST(Pentads, MatchesChunkMeanOracle) {
    std::mt19937_64 rng(4);
    std::uniform_real_distribution<double> uni(-5, 5);
    std::vector<double> daily(37);
    for (auto& v : daily) v = uni(rng);
    const auto p = pentad_aggregate(daily);
    ASSERT_EQ(p.size(), 8u);  // 7 full + 1 partial
    for (std::size_t k = 0; k < 8; ++k) {
        double acc = 0.0;
        int n = 0;
        for (std::size_t j = 5 * k; j < std::min<std::size_t>(daily.size(), 5 * k + 5); ++j) {
            acc += daily[j];
            ++n;
        }
        EXPECT_NEAR(p[k], acc / n, 1e-12);
    }
}

TEST(Pentads, CalendarLeapYearFinalPentadSixDays) {
    std::vector<double> daily;
    for (int d = 0; d < 366; ++d) daily.push_back(static_cast<double>(d));
    const auto p = pentad_aggregate_calendar(daily, 2020);  // leap year
    ASSERT_EQ(p.size(), 73u);
    // Final pentad averages days 360..365 (six days).
    EXPECT_NEAR(p[72], (360 + 361 + 362 + 363 + 364 + 365) / 6.0, 1e-12);
    EXPECT_NEAR(p[0], 2.0, 1e-12);
}

// ---------------------------------------------------------------------------
// FDII
// ---------------------------------------------------------------------------

TEST(Fdii, StationarySeriesGivesZero) {
    const std::vector<double> pct(20, 50.0);
    const FDIIResult r = fdii(pct);
    EXPECT_DOUBLE_EQ(r.fdii, 0.0);
    EXPECT_EQ(r.onset_pentad, -1);
}

TEST(Fdii, WorkedExample) {
    // Best drop 45 -> 8 over 2 pentads: rate 18.5, FD_INT = 18.5/3.75 = 4.9333;
    // below-20 run of four 8s: DRO_SEV = 12; FDII = 59.2.
    const std::vector<double> pct = {45, 45, 20, 8, 8, 8, 8};
    const FDIIResult r = fdii(pct);
    EXPECT_NEAR(r.fd_int, 18.5 / 3.75, 1e-12);
    EXPECT_NEAR(r.dro_sev, 12.0, 1e-12);
    EXPECT_NEAR(r.fdii, 59.2, 1e-6);
    EXPECT_EQ(r.onset_pentad, 1);
    EXPECT_EQ(r.extent, 4);
}

TEST(Fdii, SlowDropInadmissible) {
    // 15-point drop spread over 10 pentads: 1.5/pentad within any 8-pentad
    // window never reaches the 15-point minimum.
    std::vector<double> pct;
    for (int i = 0; i <= 10; ++i) pct.push_back(30.0 - 1.5 * i);
    for (int i = 0; i < 5; ++i) pct.push_back(15.0);
    const FDIIResult r = fdii(pct);
    EXPECT_DOUBLE_EQ(r.fdii, 0.0);
}

TEST(Fdii, ThresholdEdges) {
    // Drop of exactly 15 ending exactly at 20 is admissible, but a severity
    // run requires pentads strictly below the ceiling.
    const std::vector<double> at_edge = {35, 20, 20, 20};
    EXPECT_DOUBLE_EQ(fdii(at_edge).fdii, 0.0);
    const std::vector<double> below = {35, 19, 19, 19};
    const FDIIResult r = fdii(below);
    EXPECT_GT(r.fdii, 0.0);
    EXPECT_NEAR(r.fd_int, 16.0 / 3.75, 1e-12);
    EXPECT_NEAR(r.dro_sev, 1.0, 1e-12);
    // Drop of 14.9 inadmissible.
    const std::vector<double> shy = {33.9, 19, 19, 19};
    EXPECT_DOUBLE_EQ(fdii(shy).fdii, 0.0);
}

TEST(Fdii, SeverityCapAtEighteenPentads) {
    std::vector<double> pct = {50, 10};
    for (int i = 0; i < 30; ++i) pct.push_back(10.0);
    const FDIIResult r = fdii(pct);
    EXPECT_EQ(r.extent, 18);
    EXPECT_NEAR(r.dro_sev, 10.0, 1e-12);
}

TEST(Fdii, ShortSeriesRejected) {
    EXPECT_THROW(fdii({50.0}), std::invalid_argument);
}

// ---------------------------------------------------------------------------
// percentile table + forecast indices on a synthetic archive
// ---------------------------------------------------------------------------

namespace {

struct IndexFixture {
    fs::path dir;
    GridSpec grid = GridSpec::regular(4, 8);
    VariableCatalog catalog = VariableCatalog::standard();
    DatasetSplit split;
    Archive processed;

    IndexFixture(const std::string& tag, std::vector<SynthEvent> events, std::uint64_t seed = 31,
                 std::vector<int> years = {2001, 2002, 2003, 2004})  // short fixture for op tests
    {
        dir = fs::path(::testing::TempDir()) / ("dc_idx_" + tag);
        fs::remove_all(dir);
        SynthSpec spec;
        spec.years = years;
        spec.events = std::move(events);
        SynthGenerator gen(grid, spec, seed, catalog);
        Archive raw = gen.generate(dir / "raw", Provenance{});
        split.train = years;
        split.train.pop_back();
        split.val = {years.back()};
        processed = preprocess_archive(raw, dir / "proc", catalog, split, Provenance{});
    }
};

}  // namespace

TEST(PercentileTable, AgreesWithDirectPoolOracle) {
    IndexFixture fx("pools", {});
    PercentileTable table(fx.processed, "sm1", fx.split.train);
    const std::size_t cells = fx.grid.cells();
    std::mt19937_64 rng(5);
    std::uniform_int_distribution<int> cell_pick(0, static_cast<int>(cells) - 1);
    for (int trial = 0; trial < 10; ++trial) {
        const std::size_t c = static_cast<std::size_t>(cell_pick(rng));
        const Date d{2002, 5, 15};
        const int ring = ring_position(d);
        // Direct pool: gather all training samples within +/- 15 ring days.
        std::vector<double> pool;
        for (int y : fx.split.train) {
            const auto cube = fx.processed.cube("sm1", y);
            for (int dd = 0; dd < days_in_year(y); ++dd) {
                const Date date = add_days(Date{y, 1, 1}, dd);
                if (ring_distance(ring_position(date), ring) > 15) continue;
                pool.push_back((*cube)[static_cast<std::size_t>(dd) * cells + c]);
            }
        }
        const double value = 20.0 + trial;
        EXPECT_NEAR(table.percentile(c, ring, value), sm_percentile(value, pool), 1e-12);
    }
}

TEST(ForecastIndices, TruthRolloutReproducesAnalysisIndices) {
    IndexFixture fx("consistency", {});
    const Date init{2004, 3, 1};
    ForecastRollout truth = truth_rollout(fx.processed, fx.catalog, init, 30);
    IndexForecast from_rollout = forecast_indices(truth, fx.processed, fx.catalog, fx.split.train);

    // Analysis-side recomputation through the individual ops.
    const ClimatologyView esr_clim = ClimatologyView::from(fx.processed, "esr");
    const std::size_t cells = fx.grid.cells();
    for (int lead : {1, 10, 30}) {
        const Date d = add_days(init, lead);
        const auto e = esr(fx.processed.field("evap", d), fx.processed.field("pet", d));
        const auto s = sesr(e, esr_clim, d);
        for (std::size_t c = 0; c < cells; ++c) {
            const double got = from_rollout.sesr[static_cast<std::size_t>(lead - 1) * cells + c];
            if (is_missing(s[c]))
                EXPECT_TRUE(is_missing(got));
            else
                EXPECT_NEAR(got, s[c], 1e-9);
        }
    }

    // FDII path: identical percentile series through the same pools.
    PercentileTable pools(fx.processed, "sm1", fx.split.train);
    const int ch = fx.catalog.output_channel("sm1");
    for (std::size_t c = 0; c < cells; c += 7) {
        std::vector<double> pct;
        for (int lead = 1; lead <= 30; ++lead) {
            const Date d = add_days(init, lead);
            pct.push_back(pools.percentile(c, ring_position(d), truth.frame(lead, ch)[c]));
        }
        const FDIIResult ref = fdii(pentad_aggregate(pct));
        EXPECT_NEAR(from_rollout.fdii_layers[0][c].fdii, ref.fdii, 1e-9);
    }
}

TEST(ForecastIndices, RolloutEqualToClimatologyGivesNearZeroSesr) {
    IndexFixture fx("climzero", {});
    const Date init{2004, 6, 1};
    const int leads = 10;
    // Build a rollout whose ET/PET equal the climatological ESR numerator and
    // denominator: set PET = 1 and ET = climatological mean of ESR.
    ForecastRollout roll;
    roll.init = init;
    roll.leads = leads;
    roll.channels = fx.catalog.n_outputs();
    roll.n_lat = fx.grid.n_lat;
    roll.n_lon = fx.grid.n_lon;
    roll.values.assign(static_cast<std::size_t>(leads) * roll.channels * roll.cells(), 0.0);
    const ClimatologyView esr_clim = ClimatologyView::from(fx.processed, "esr");
    const int c_evap = fx.catalog.output_channel("evap");
    const int c_pet = fx.catalog.output_channel("pet");
    for (int lead = 1; lead <= leads; ++lead) {
        const int slot = climatology_slot(add_days(init, lead));
        for (std::size_t c = 0; c < roll.cells(); ++c) {
            const std::size_t base = (static_cast<std::size_t>(lead - 1) * roll.channels) * roll.cells();
            roll.values[base + static_cast<std::size_t>(c_pet) * roll.cells() + c] = 1.0;
            roll.values[base + static_cast<std::size_t>(c_evap) * roll.cells() + c] =
                esr_clim.mean_at(slot, c);
        }
    }
    IndexForecast f = forecast_indices(roll, fx.processed, fx.catalog, fx.split.train);
    for (int lead = 1; lead <= leads; ++lead)
        for (std::size_t c = 0; c < roll.cells(); ++c) {
            const double v = f.sesr[static_cast<std::size_t>(lead - 1) * roll.cells() + c];
            if (!is_missing(v)) EXPECT_NEAR(v, 0.0, 1e-5);
        }
}

TEST(ForecastIndices, InjectedEventDetectedOnlyInsideBox) {
    SynthEvent ev;
    ev.year = 2003;  // training year
    ev.start_doy = 150;
    ev.length_days = 35;
    ev.lat0 = -90;
    ev.lat1 = 0;
    ev.lon0 = -180;
    ev.lon1 = 0;
    // Quiet unaffected cells need enough training years that one year's
    // interannual percentile cluster spans less than the 15-point
    // admissibility drop (9 train years -> ~11-point clusters).
    std::vector<int> years;
    for (int y = 2001; y <= 2010; ++y) years.push_back(y);
    IndexFixture fx("event", {ev}, 31, years);

    // Percentile drop at an affected cell: >= 30 points within <= 4 pentads.
    PercentileTable pools(fx.processed, "sm1", fx.split.train);
    const GridSpec& g = fx.grid;
    const std::size_t cells = g.cells();
    std::size_t inside = 0, outside_nonzero = 0, outside_total = 0, inside_detected = 0;
    for (int i = 0; i < g.n_lat; ++i)
        for (int j = 0; j < g.n_lon; ++j) {
            const std::size_t c = static_cast<std::size_t>(i * g.n_lon + j);
            std::vector<double> daily;
            const auto cube = fx.processed.cube("sm1", 2003);
            for (int dd = 0; dd < days_in_year(2003); ++dd) {
                const Date date = add_days(Date{2003, 1, 1}, dd);
                daily.push_back(pools.percentile(c, ring_position(date),
                                                 (*cube)[static_cast<std::size_t>(dd) * cells + c]));
            }
            const FDIIResult r = fdii(pentad_aggregate_calendar(daily, 2003));
            const bool in_box = g.lat[static_cast<std::size_t>(i)] <= 0 && g.lon[static_cast<std::size_t>(j)] <= 0;
            if (in_box) {
                ++inside;
                if (r.fdii > 0.0) ++inside_detected;
            } else {
                ++outside_total;
                if (r.fdii > 0.0) ++outside_nonzero;
            }
        }
    ASSERT_GT(inside, 0u);
    EXPECT_EQ(inside_detected, inside);  // all target cells fire
    EXPECT_LE(static_cast<double>(outside_nonzero), 0.01 * static_cast<double>(outside_total));
}
