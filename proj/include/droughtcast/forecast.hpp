#pragma once

// Autoregressive forecast rollouts and index forecasts derived from them.
// A rollout is a [lead, output_channel, lat, lon] cube in physical units with
// its initialization date and provenance.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "droughtcast/archive.hpp"
#include "droughtcast/indices.hpp"
#include "droughtcast/training.hpp"

namespace droughtcast {

struct ForecastRollout {
    Date init;
    int leads = 0;
    int channels = 0;
    int n_lat = 0, n_lon = 0;
    std::vector<double> values;  // [leads][channels][cells], lead 1 first
    Provenance provenance;

    std::size_t cells() const { return static_cast<std::size_t>(n_lat) * n_lon; }

    const double* frame(int lead, int channel) const {
        return values.data() +
               (static_cast<std::size_t>(lead - 1) * channels + static_cast<std::size_t>(channel)) * cells();
    }

    std::vector<double> field(int lead, int channel) const {
        const double* p = frame(lead, channel);
        return std::vector<double>(p, p + cells());
    }
};

// Constrained autoregressive rollout from an archive initialization date.
// Throws NumericIncident if a step produces non-finite values.
inline ForecastRollout run_rollout(const CrossFormerNet& net, const ModelRuntime& rt,
                                   const Archive& ar, const VariableCatalog& catalog, const Date& init,
                                   int leads) {
    NoGradGuard ng;
    ForwardCtx ctx;  // evaluation mode
    ForecastRollout out;
    out.init = init;
    out.leads = leads;
    out.channels = catalog.n_outputs();
    out.n_lat = ar.grid().n_lat;
    out.n_lon = ar.grid().n_lon;
    out.provenance = ar.provenance();
    out.values.reserve(static_cast<std::size_t>(leads) * out.channels * out.cells());

    Tensor x = assemble_input(ar, init, catalog);
    for (int lead = 1; lead <= leads; ++lead) {
        auto [pred, reports] = model_step(net, rt, x, ctx);
        for (double v : pred.values())
            if (!std::isfinite(v))
                throw NumericIncident("non-finite rollout value at lead " + std::to_string(lead) +
                                      " from " + format_date(init));
        out.values.insert(out.values.end(), pred.values().begin(), pred.values().end());
        if (lead < leads)
            x = advance_state(pred, assemble_forcings(ar, add_days(init, lead), catalog), catalog);
    }
    return out;
}

// Truth "rollout": the analysis stacked over the same lead window, for
// oracle-model tests and index consistency checks.
inline ForecastRollout truth_rollout(const Archive& ar, const VariableCatalog& catalog, const Date& init,
                                     int leads) {
    ForecastRollout out;
    out.init = init;
    out.leads = leads;
    out.channels = catalog.n_outputs();
    out.n_lat = ar.grid().n_lat;
    out.n_lon = ar.grid().n_lon;
    out.provenance = ar.provenance();
    for (int lead = 1; lead <= leads; ++lead) {
        Tensor t = assemble_target(ar, add_days(init, lead), catalog);
        out.values.insert(out.values.end(), t.values().begin(), t.values().end());
    }
    return out;
}

// GRD1 export: one cube per output variable with the lead axis as time.
inline void write_rollout(const ForecastRollout& r, const std::filesystem::path& dir,
                          const VariableCatalog& catalog, const GridSpec& grid) {
    std::filesystem::create_directories(dir);
    std::ofstream mf(dir / "rollout.txt");
    mf << "droughtcast_rollout 1\n";
    mf << "init " << format_date(r.init) << "\n";
    mf << "leads " << r.leads << "\n";
    mf << r.provenance.to_line() << "\n";
    for (const auto* def : catalog.outputs()) {
        Grd1Meta m;
        m.variable = def->name;
        m.units = def->units;
        m.role = "forecast";
        m.source = "rollout";
        m.time_tag = "lead";
        m.n_time = r.leads;
        m.n_lat = grid.n_lat;
        m.n_lon = grid.n_lon;
        m.lat = grid.lat;
        m.lon = grid.lon;
        std::vector<float> data(static_cast<std::size_t>(r.leads) * r.cells());
        for (int lead = 1; lead <= r.leads; ++lead) {
            const double* p = r.frame(lead, def->output_index);
            for (std::size_t c = 0; c < r.cells(); ++c)
                data[static_cast<std::size_t>(lead - 1) * r.cells() + c] = static_cast<float>(p[c]);
        }
        grd1::write(dir, "fc_" + def->name, m, data);
    }
}

inline ForecastRollout read_rollout(const std::filesystem::path& dir, const VariableCatalog& catalog) {
    std::ifstream mf(dir / "rollout.txt");
    if (!mf) throw std::runtime_error("rollout: missing manifest in " + dir.string());
    ForecastRollout r;
    std::string line;
    while (std::getline(mf, line)) {
        std::istringstream is(line);
        std::string key;
        is >> key;
        if (key == "init") {
            std::string d;
            is >> d;
            r.init = parse_date(d);
        } else if (key == "leads") {
            is >> r.leads;
        }
    }
    r.channels = catalog.n_outputs();
    bool first = true;
    for (const auto* def : catalog.outputs()) {
        auto [meta, data] = grd1::read(dir, "fc_" + def->name);
        if (first) {
            r.n_lat = meta.n_lat;
            r.n_lon = meta.n_lon;
            r.values.assign(static_cast<std::size_t>(r.leads) * r.channels * r.cells(), 0.0);
            first = false;
        }
        for (int lead = 1; lead <= r.leads; ++lead)
            for (std::size_t c = 0; c < r.cells(); ++c)
                r.values[(static_cast<std::size_t>(lead - 1) * r.channels +
                          static_cast<std::size_t>(def->output_index)) *
                             r.cells() +
                         c] = data[static_cast<std::size_t>(lead - 1) * r.cells() + c];
    }
    return r;
}

// ---------------------------------------------------------------------------
// Index forecasts from a rollout
// ---------------------------------------------------------------------------

struct IndexForecast {
    Date init;
    int leads = 0;
    std::size_t cells = 0;
    std::vector<double> sesr;                          // [leads][cells]
    std::vector<std::vector<FDIIResult>> fdii_layers;  // [4][cells]

    struct EventRow {
        int layer;
        std::size_t cell;
        FDIIResult result;
    };
    std::vector<EventRow> events;
};

// SESR per lead from predicted ET/PET; FDII per soil layer from predicted SM
// percentile pentads. Climatologies and percentile pools come from the
// training period of the processed archive (never forecast-derived).
inline IndexForecast forecast_indices(const ForecastRollout& r, const Archive& processed,
                                      const VariableCatalog& catalog,
                                      const std::vector<int>& train_years,
                                      const FdiiThresholds& th = {}) {
    IndexForecast out;
    out.init = r.init;
    out.leads = r.leads;
    out.cells = r.cells();
    const ClimatologyView esr_clim = ClimatologyView::from(processed, "esr");
    const int c_evap = catalog.output_channel("evap");
    const int c_pet = catalog.output_channel("pet");

    out.sesr.assign(static_cast<std::size_t>(r.leads) * out.cells, kFillValue);
    for (int lead = 1; lead <= r.leads; ++lead) {
        const Date date = add_days(r.init, lead);
        std::vector<double> e = esr(r.field(lead, c_evap), r.field(lead, c_pet));
        std::vector<double> s = sesr(e, esr_clim, date);
        std::copy(s.begin(), s.end(), out.sesr.begin() + static_cast<std::ptrdiff_t>(lead - 1) * static_cast<std::ptrdiff_t>(out.cells));
    }

    const std::array<std::string, 4> layers = {"sm1", "sm2", "sm3", "sm4"};
    out.fdii_layers.resize(4);
    for (std::size_t li = 0; li < layers.size(); ++li) {
        const PercentileTable pools(processed, layers[li], train_years);
        const int ch = catalog.output_channel(layers[li]);
        out.fdii_layers[li].resize(out.cells);
        std::vector<double> pct_daily(static_cast<std::size_t>(r.leads));
        for (std::size_t c = 0; c < out.cells; ++c) {
            for (int lead = 1; lead <= r.leads; ++lead) {
                const Date date = add_days(r.init, lead);
                pct_daily[static_cast<std::size_t>(lead - 1)] =
                    pools.percentile(c, ring_position(date), r.frame(lead, ch)[c]);
            }
            const std::vector<double> pentads = pentad_aggregate(pct_daily);
            if (pentads.size() >= 2) {
                FDIIResult res = fdii(pentads, th);
                out.fdii_layers[li][c] = res;
                if (res.fdii > 0.0)
                    out.events.push_back({static_cast<int>(li + 1), c, res});
            }
        }
    }
    return out;
}

inline void write_index_forecast(const IndexForecast& f, const std::filesystem::path& dir,
                                 const GridSpec& grid, const Provenance& prov) {
    std::filesystem::create_directories(dir);
    Grd1Meta m;
    m.variable = "sesr";
    m.units = "1";
    m.role = "index_forecast";
    m.source = "indices";
    m.time_tag = "lead";
    m.n_time = f.leads;
    m.n_lat = grid.n_lat;
    m.n_lon = grid.n_lon;
    m.lat = grid.lat;
    m.lon = grid.lon;
    std::vector<float> data(f.sesr.size());
    for (std::size_t i = 0; i < data.size(); ++i)
        data[i] = is_missing(f.sesr[i]) ? kFillValue : static_cast<float>(f.sesr[i]);
    grd1::write(dir, "idx_sesr", m, data);

    for (std::size_t li = 0; li < f.fdii_layers.size(); ++li) {
        m.variable = "fdii_sm" + std::to_string(li + 1);
        m.n_time = 1;
        std::vector<float> fd(f.cells, 0.0f);
        for (std::size_t c = 0; c < f.cells; ++c) fd[c] = static_cast<float>(f.fdii_layers[li][c].fdii);
        grd1::write(dir, "idx_fdii_sm" + std::to_string(li + 1), m, fd);
    }

    std::ofstream ev(dir / "fdii_events.tsv");
    ev << "# " << prov.to_line() << "\n";
    ev << "layer\tcell\tonset_pentad\textent\tfd_int\tdro_sev\tfdii\n";
    for (const auto& e : f.events)
        ev << e.layer << "\t" << e.cell << "\t" << e.result.onset_pentad << "\t" << e.result.extent
           << "\t" << grd1::fmt_g17(e.result.fd_int) << "\t" << grd1::fmt_g17(e.result.dro_sev) << "\t"
           << grd1::fmt_g17(e.result.fdii) << "\n";
}

}  // namespace droughtcast
