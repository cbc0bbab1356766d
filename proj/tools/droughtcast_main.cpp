// droughtcast command-line tool: synthetic archive generation, preprocessing,
// two-phase training, constrained rollout prediction, drought indices, and
// forecast verification scorecards.
//
// Exit codes: 0 success, 2 configuration error, 3 data error,
// 4 numeric incident (non-finite loss or rollout).

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "droughtcast/evaluation.hpp"
#include "droughtcast/forecast.hpp"
#include "droughtcast/indices.hpp"
#include "droughtcast/model.hpp"
#include "droughtcast/pipeline.hpp"
#include "droughtcast/runconfig.hpp"
#include "droughtcast/training.hpp"
#include "droughtcast/version.hpp"

namespace fs = std::filesystem;
using namespace droughtcast;

namespace {

struct GlobalArgs {
    std::string config_path;
    std::uint64_t seed = 1;
    int threads = 1;
    std::string out_dir = "out";
    std::vector<std::string> overrides;
};

RunConfig load_config(const GlobalArgs& g) {
    RunConfig cfg;
    if (!g.config_path.empty()) {
        cfg = parse_runconfig_file(g.config_path, g.overrides);
    } else {
        std::istringstream empty;
        cfg = parse_runconfig(empty, g.overrides);
    }
    cfg.seed = g.seed;
    cfg.threads = g.threads;
    return cfg;
}

Provenance make_provenance(const RunConfig& cfg) {
    Provenance p;
    p.config_hash = cfg.hash_hex();
    p.seed = cfg.seed;
    p.version = kVersionTag;
    return p;
}

fs::path resolve(const GlobalArgs& g, const std::string& p) {
    fs::path path(p);
    return path.is_absolute() ? path : fs::path(g.out_dir) / path;
}

int cmd_synth(const GlobalArgs& g) {
    RunConfig cfg = load_config(g);
    const int f = cfg.coarsen ? 4 : 1;
    GridSpec grid = GridSpec::regular(cfg.grid_nlat * f, cfg.grid_nlon * f);
    VariableCatalog catalog = VariableCatalog::standard();
    SynthGenerator gen(grid, cfg.synth, cfg.seed, catalog);
    Archive ar = gen.generate(resolve(g, cfg.raw_archive), make_provenance(cfg));
    std::cout << "synth: wrote " << ar.dir().string() << " (" << cfg.synth.years.size() << " years, "
              << grid.n_lat << "x" << grid.n_lon << ")\n";
    return 0;
}

int cmd_preprocess(const GlobalArgs& g) {
    RunConfig cfg = load_config(g);
    VariableCatalog catalog = VariableCatalog::standard();
    Archive raw = Archive::open(resolve(g, cfg.raw_archive));
    if (cfg.coarsen) {
        Archive coarse = coarsen_archive(raw, resolve(g, cfg.raw_archive + "_1deg"), catalog,
                                         make_provenance(cfg));
        Archive processed = preprocess_archive(coarse, resolve(g, cfg.processed_archive), catalog,
                                               cfg.split(), make_provenance(cfg));
        std::cout << "preprocess: wrote " << processed.dir().string() << " (coarsened)\n";
    } else {
        Archive processed = preprocess_archive(raw, resolve(g, cfg.processed_archive), catalog,
                                               cfg.split(), make_provenance(cfg));
        std::cout << "preprocess: wrote " << processed.dir().string() << "\n";
    }
    return 0;
}

int cmd_train(const GlobalArgs& g, const std::string& resume) {
    RunConfig cfg = load_config(g);
    VariableCatalog catalog = VariableCatalog::standard();
    Archive ar = Archive::open(resolve(g, cfg.processed_archive));
    if (ar.catalog_hash() != catalog.hash()) throw std::runtime_error("archive/catalog mismatch");
    CrossFormerNet net(cfg.model, cfg.seed);
    fs::create_directories(fs::path(g.out_dir));
    std::ofstream log(fs::path(g.out_dir) / "train_log.txt");
    Trainer trainer(net, ar, catalog, cfg.split(), cfg.train, cfg.physics, cfg.seed, &log);
    const fs::path ckpt_dir = fs::path(g.out_dir) / "checkpoints";

    std::string phase = "single";
    int epoch_done = 0;
    if (!resume.empty()) {
        auto [ph, ep] = trainer.load_checkpoint(resume);
        phase = ph;
        epoch_done = ep;
        std::cout << "train: resumed from " << resume << " (phase " << phase << ", epoch " << epoch_done
                  << ")\n";
    }
    if (phase == "single") {
        if (epoch_done < cfg.train.single_step_epochs)
            trainer.run_phase(1, cfg.train.single_step_epochs, "single", ckpt_dir, epoch_done + 1);
        phase = "multi";
        epoch_done = 0;
    }
    if (phase == "multi" && cfg.train.multistep_epochs > 0 && epoch_done < cfg.train.multistep_epochs)
        trainer.run_phase(cfg.train.rollout_steps, cfg.train.multistep_epochs, "multi", ckpt_dir,
                          epoch_done + 1);
    std::cout << "train: checkpoints in " << ckpt_dir.string() << "\n";
    return 0;
}

int cmd_predict(const GlobalArgs& g, const std::string& checkpoint, const std::string& init_str,
                int leads) {
    RunConfig cfg = load_config(g);
    VariableCatalog catalog = VariableCatalog::standard();
    Archive ar = Archive::open(resolve(g, cfg.processed_archive));
    CrossFormerNet net(cfg.model, cfg.seed);
    Trainer loader(net, ar, catalog, cfg.split(), cfg.train, cfg.physics, cfg.seed);
    loader.load_checkpoint(checkpoint);
    const Date init = parse_date(init_str);
    ForecastRollout roll = run_rollout(net, loader.runtime(), ar, catalog, init, leads);
    roll.provenance = make_provenance(cfg);
    const fs::path dir = fs::path(g.out_dir) / ("rollout_" + format_date(init));
    write_rollout(roll, dir, catalog, ar.grid());
    std::cout << "predict: wrote " << dir.string() << " (" << leads << " leads)\n";
    return 0;
}

int cmd_indices(const GlobalArgs& g, const std::string& rollout_dir, bool analysis) {
    RunConfig cfg = load_config(g);
    VariableCatalog catalog = VariableCatalog::standard();
    Archive ar = Archive::open(resolve(g, cfg.processed_archive));
    const Provenance prov = make_provenance(cfg);
    if (!rollout_dir.empty()) {
        ForecastRollout roll = read_rollout(rollout_dir, catalog);
        IndexForecast f = forecast_indices(roll, ar, catalog, cfg.train_years);
        const fs::path dir = fs::path(g.out_dir) / ("indices_" + format_date(roll.init));
        write_index_forecast(f, dir, ar.grid(), prov);
        std::cout << "indices: wrote " << dir.string() << " (" << f.events.size() << " FDII events)\n";
        return 0;
    }
    if (!analysis) throw ConfigError("indices: pass --rollout DIR or --analysis");

    // Analysis indices over the test years: SESR cube per day plus FDII per
    // soil layer from calendar-pentad percentile series.
    const fs::path dir = fs::path(g.out_dir) / "indices_analysis";
    fs::create_directories(dir);
    const GridSpec& grid = ar.grid();
    const std::size_t cells = grid.cells();
    const ClimatologyView esr_clim = ClimatologyView::from(ar, "esr");
    std::int64_t total_days = 0;
    for (int y : cfg.test_years) total_days += days_in_year(y);
    std::vector<float> sesr_cube(static_cast<std::size_t>(total_days) * cells, kFillValue);
    std::int64_t t = 0;
    for (int y : cfg.test_years) {
        for (int d = 0; d < days_in_year(y); ++d, ++t) {
            const Date date = add_days(Date{y, 1, 1}, d);
            std::vector<double> e = esr(ar.field("evap", date), ar.field("pet", date));
            std::vector<double> s = sesr(e, esr_clim, date);
            for (std::size_t c = 0; c < cells; ++c)
                if (!is_missing(s[c]))
                    sesr_cube[static_cast<std::size_t>(t) * cells + c] = static_cast<float>(s[c]);
        }
    }
    Grd1Meta meta;
    meta.variable = "sesr";
    meta.units = "1";
    meta.role = "index_analysis";
    meta.source = "indices";
    meta.time_tag = std::to_string(cfg.test_years.front());
    meta.n_time = static_cast<int>(total_days);
    meta.n_lat = grid.n_lat;
    meta.n_lon = grid.n_lon;
    meta.lat = grid.lat;
    meta.lon = grid.lon;
    grd1::write(dir, "idx_sesr_analysis", meta, sesr_cube);

    std::ofstream ev(dir / "fdii_events.tsv");
    ev << "# " << prov.to_line() << "\n";
    ev << "layer\tcell\tonset_pentad\textent\tfd_int\tdro_sev\tfdii\n";
    for (int layer = 1; layer <= 4; ++layer) {
        const std::string var = "sm" + std::to_string(layer);
        PercentileTable pools(ar, var, cfg.train_years);
        std::vector<float> fdii_field(cells, 0.0f);
        std::vector<double> daily(static_cast<std::size_t>(total_days));
        for (std::size_t c = 0; c < cells; ++c) {
            std::int64_t tt = 0;
            for (int y : cfg.test_years) {
                const auto cube = ar.cube(var, y);
                for (int d = 0; d < days_in_year(y); ++d, ++tt) {
                    const Date date = add_days(Date{y, 1, 1}, d);
                    daily[static_cast<std::size_t>(tt)] =
                        pools.percentile(c, ring_position(date), (*cube)[static_cast<std::size_t>(d) * cells + c]);
                }
            }
            const std::vector<double> pent = pentad_aggregate_calendar(daily, cfg.test_years.front());
            FDIIResult r = fdii(pent);
            fdii_field[c] = static_cast<float>(r.fdii);
            if (r.fdii > 0.0)
                ev << layer << "\t" << c << "\t" << r.onset_pentad << "\t" << r.extent << "\t"
                   << grd1::fmt_g17(r.fd_int) << "\t" << grd1::fmt_g17(r.dro_sev) << "\t"
                   << grd1::fmt_g17(r.fdii) << "\n";
        }
        meta.variable = "fdii_" + var;
        meta.n_time = 1;
        grd1::write(dir, "idx_fdii_" + var + "_analysis", meta, fdii_field);
    }
    std::cout << "indices: wrote " << dir.string() << "\n";
    return 0;
}

int cmd_evaluate(const GlobalArgs& g, const std::string& checkpoint) {
    RunConfig cfg = load_config(g);
    VariableCatalog catalog = VariableCatalog::standard();
    Archive ar = Archive::open(resolve(g, cfg.processed_archive));
    CrossFormerNet net(cfg.model, cfg.seed);
    Trainer loader(net, ar, catalog, cfg.split(), cfg.train, cfg.physics, cfg.seed);
    loader.load_checkpoint(checkpoint);

    std::vector<RegionMask> masks;
    for (const auto& name : cfg.masks) {
        if (name == "global") {
            masks.push_back(RegionMask::global(ar.grid()));
        } else {
            const auto lsm = ar.static_field("lsm");
            masks.push_back(RegionMask::africa(ar.grid(), std::vector<double>(lsm->begin(), lsm->end())));
        }
    }
    EvalOptions opt = cfg.eval;
    opt.threads = cfg.threads;
    std::vector<SkillReport> reports =
        rollout_evaluate(net, loader.runtime(), ar, catalog, cfg.test_years, masks, opt);
    const fs::path dir = fs::path(g.out_dir) / "scorecards";
    std::size_t incidents = 0;
    for (auto& rep : reports) {
        rep.provenance = make_provenance(cfg);
        scorecard_export(rep, dir);
        incidents = rep.incidents.size();
    }
    std::cout << "evaluate: wrote " << dir.string() << " (" << reports.size() << " masks";
    if (incidents) std::cout << ", " << incidents << " numeric incidents";
    std::cout << ")\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"droughtcast: S2S drought forecasting emulator workbench"};
    app.require_subcommand(1);

    GlobalArgs g;
    app.add_option("--config", g.config_path, "run configuration file");
    app.add_option("--seed", g.seed, "root random seed");
    app.add_option("--threads", g.threads, "worker thread cap");
    app.add_option("--out", g.out_dir, "output directory");
    app.add_option("--set", g.overrides, "override config keys (section.key=value)");

    app.add_subcommand("synth", "generate a synthetic GRD1 archive");
    app.add_subcommand("preprocess", "gap fill, derive accumulations, climatology, stats");

    auto* train = app.add_subcommand("train", "two-phase model training");
    std::string resume;
    train->add_option("--resume", resume, "checkpoint directory to resume from");

    auto* predict = app.add_subcommand("predict", "constrained autoregressive rollout");
    std::string ckpt, init_str;
    int leads = 90;
    predict->add_option("--checkpoint", ckpt, "checkpoint directory")->required();
    predict->add_option("--init", init_str, "initialization date YYYY-MM-DD")->required();
    predict->add_option("--leads", leads, "forecast horizon in days");

    auto* indices = app.add_subcommand("indices", "SESR/FDII from a rollout or the analysis");
    std::string rollout_dir;
    bool analysis = false;
    indices->add_option("--rollout", rollout_dir, "rollout directory from predict");
    indices->add_flag("--analysis", analysis, "compute indices from the archive itself");

    auto* evaluate = app.add_subcommand("evaluate", "rollout skill scorecards over the test split");
    std::string eval_ckpt;
    evaluate->add_option("--checkpoint", eval_ckpt, "checkpoint directory")->required();

    CLI11_PARSE(app, argc, argv);

    try {
        if (app.got_subcommand("synth")) return cmd_synth(g);
        if (app.got_subcommand("preprocess")) return cmd_preprocess(g);
        if (app.got_subcommand("train")) return cmd_train(g, resume);
        if (app.got_subcommand("predict")) return cmd_predict(g, ckpt, init_str, leads);
        if (app.got_subcommand("indices")) return cmd_indices(g, rollout_dir, analysis);
        if (app.got_subcommand("evaluate")) return cmd_evaluate(g, eval_ckpt);
    } catch (const NumericIncident& e) {
        std::cerr << "numeric incident: " << e.what() << "\n";
        return 4;
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const std::invalid_argument& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return 3;
    }
    return 0;
}
