#pragma once

// Training machinery: latitude-weighted MSE, AdamW with decoupled weight
// decay, cosine learning-rate annealing, the two-phase (single-step then
// multistep rollout) training loop, and bit-exact checkpointing of
// parameters, optimizer moments, power-iteration buffers and rng streams.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <limits>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "droughtcast/archive.hpp"
#include "droughtcast/catalog.hpp"
#include "droughtcast/model.hpp"
#include "droughtcast/physics.hpp"
#include "droughtcast/pipeline.hpp"
#include "droughtcast/tensor.hpp"

namespace droughtcast {

// Raised when a loss or rollout goes non-finite.
struct NumericIncident : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Loss
// ---------------------------------------------------------------------------

// Mean over all elements of w(row) * (pred - target)^2, with the row weights
// normalized to mean 1. Ranks >= 2 are accepted; the second-to-last axis is
// the weighted (latitude) one.
inline Tensor latitude_weighted_mse(const Tensor& pred, const Tensor& target,
                                    const std::vector<double>& row_weights) {
    check_same_shape(pred, target, "latitude_weighted_mse");
    if (pred.rank() < 2) throw std::invalid_argument("latitude_weighted_mse: rank must be >= 2");
    const Shape& s = pred.shape();
    const std::int64_t w = s.back();
    const std::int64_t h = s[s.size() - 2];
    if (row_weights.size() != static_cast<std::size_t>(h))
        throw std::invalid_argument("latitude_weighted_mse: weight length mismatch");
    double wmean = 0.0;
    for (double v : row_weights) wmean += v;
    wmean /= static_cast<double>(h);
    std::vector<double> wn(row_weights);
    for (auto& v : wn) v /= wmean;

    const std::int64_t planes = static_cast<std::int64_t>(pred.numel()) / (h * w);
    const double inv_n = 1.0 / static_cast<double>(pred.numel());
    double acc = 0.0;
    for (std::int64_t p = 0; p < planes; ++p)
        for (std::int64_t i = 0; i < h; ++i) {
            const double wi = wn[static_cast<std::size_t>(i)];
            const std::size_t base = static_cast<std::size_t>((p * h + i) * w);
            for (std::int64_t j = 0; j < w; ++j) {
                const double d = pred[base + static_cast<std::size_t>(j)] - target[base + static_cast<std::size_t>(j)];
                acc += wi * d * d;
            }
        }
    auto pp = pred.data_ptr(), pt = target.data_ptr();
    return op_result({1}, {acc * inv_n}, {pred, target},
                     [pp, pt, wn = std::move(wn), planes, h, w, inv_n](detail::TensorData* out) {
                         return [out, pp, pt, wn, planes, h, w, inv_n]() {
                             const double g = out->g[0] * 2.0 * inv_n;
                             for (std::int64_t p = 0; p < planes; ++p)
                                 for (std::int64_t i = 0; i < h; ++i) {
                                     const double gw = g * wn[static_cast<std::size_t>(i)];
                                     const std::size_t base = static_cast<std::size_t>((p * h + i) * w);
                                     for (std::int64_t j = 0; j < w; ++j) {
                                         const std::size_t k = base + static_cast<std::size_t>(j);
                                         const double d = pp->v[k] - pt->v[k];
                                         if (pp->requires_grad) pp->grad()[k] += gw * d;
                                         if (pt->requires_grad) pt->grad()[k] -= gw * d;
                                     }
                                 }
                         };
                     });
}

// ---------------------------------------------------------------------------
// Optimizer and schedule
// ---------------------------------------------------------------------------

struct TrainConfig {
    double lr_max = 1e-4;
    double lr_min = 0.0;
    double l2 = 1e-5;
    int batch_size = 4;
    int single_step_epochs = 120;
    int multistep_epochs = 100;
    int rollout_steps = 3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    int early_stop_patience = 0;  // 0 disables early stopping

    void validate() const {
        if (lr_max <= 0) throw std::invalid_argument("train: lr_max must be positive");
        if (rollout_steps < 1) throw std::invalid_argument("train: rollout_steps must be >= 1");
        if (batch_size < 1) throw std::invalid_argument("train: batch_size must be >= 1");
        if (rollout_steps > 5)
            // Rollouts longer than 5 steps have diverged in practice; allowed
            // but the gradient-norm log is the guard rail.
            std::cerr << "warning: rollout_steps > 5 risks divergence\n";
    }
};

struct AdamWState {
    std::map<std::string, std::vector<double>> m, v;
    std::int64_t step = 0;
};

// Decoupled weight decay plus bias-corrected adaptive update.
inline void adamw_step(ParamStore& params, AdamWState& st, double lr, double l2, double beta1 = 0.9,
                       double beta2 = 0.999, double eps = 1e-8) {
    st.step += 1;
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(st.step));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(st.step));
    for (auto& [name, t] : params.params) {
        auto& theta = t.mutable_values();
        auto& m = st.m[name];
        auto& v = st.v[name];
        if (m.empty()) m.assign(theta.size(), 0.0);
        if (v.empty()) v.assign(theta.size(), 0.0);
        const bool has_g = t.has_grad();
        const auto& g = t.grad();
        for (std::size_t i = 0; i < theta.size(); ++i) {
            const double gi = has_g ? g[i] : 0.0;
            m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
            v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
            const double mhat = m[i] / bc1;
            const double vhat = v[i] / bc2;
            theta[i] -= lr * mhat / (std::sqrt(vhat) + eps) + lr * l2 * theta[i];
        }
    }
}

// One cosine cycle from lr_max down to lr_min across total_steps.
inline double cosine_lr(std::int64_t step, std::int64_t total_steps, double lr_max, double lr_min = 0.0) {
    if (total_steps <= 0) return lr_max;
    const double frac = std::min(1.0, static_cast<double>(step) / static_cast<double>(total_steps));
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + std::cos(M_PI * frac));
}

// ---------------------------------------------------------------------------
// Constrained model step
// ---------------------------------------------------------------------------

// All pieces a training/evaluation step needs around the bare network.
struct ModelRuntime {
    const VariableCatalog* catalog = nullptr;
    const GridSpec* grid = nullptr;
    Normalizer normalizer;
    ConstraintToggles toggles;
};

// One constrained forecast step: normalize, forward, denormalize, constrain.
// Returns the constrained physical output stack.
inline std::pair<Tensor, std::vector<BudgetReport>> model_step(const CrossFormerNet& net,
                                                               const ModelRuntime& rt,
                                                               const Tensor& input_phys,
                                                               ForwardCtx& ctx) {
    Tensor y_norm = net.forward(rt.normalizer.normalize_input(input_phys), ctx);
    Tensor y_phys = rt.normalizer.denormalize_output(y_norm);
    return apply_constraints(input_phys, y_phys, *rt.catalog, *rt.grid, rt.toggles);
}

// ---------------------------------------------------------------------------
// Trainer
// ---------------------------------------------------------------------------

struct StepRecord {
    std::string phase;
    int epoch = 0;
    std::int64_t step = 0;
    double lr = 0.0;
    double loss = 0.0;
    double grad_norm = 0.0;
    double moist_post = 0.0;
    double dry_post = 0.0;
};

struct EpochRecord {
    std::string phase;
    int epoch = 0;
    double train_loss = 0.0;
    double val_loss = 0.0;
    bool best = false;
};

struct TrainHistory {
    std::vector<StepRecord> steps;
    std::vector<EpochRecord> epochs;
    int best_epoch = -1;
    double best_val = std::numeric_limits<double>::infinity();
};

class Trainer {
  public:
    Trainer(CrossFormerNet& net, const Archive& archive, const VariableCatalog& catalog,
            const DatasetSplit& split, TrainConfig cfg, ConstraintToggles toggles, std::uint64_t seed,
            std::ostream* log = nullptr)
        : net_(net), archive_(archive), catalog_(catalog), split_(split), cfg_(std::move(cfg)),
          log_(log), seed_(seed) {
        cfg_.validate();
        split_.validate();
        rt_.catalog = &catalog_;
        rt_.grid = &archive_.grid();
        rt_.normalizer = Normalizer::from_stats(archive_.read_stats(), catalog_);
        rt_.toggles = toggles;
        shuffle_rng_ = make_stream(seed, "trainer/shuffle");
        dropout_rng_ = make_stream(seed, "trainer/dropout");
    }

    const ModelRuntime& runtime() const { return rt_; }

    // Dates with k consecutive target days inside the same year set.
    std::vector<Date> usable_dates(const std::vector<int>& years, int k) const {
        std::set<int> yset(years.begin(), years.end());
        std::vector<Date> dates;
        for (int y : years) {
            const Date start{y, 1, 1};
            for (int d = 0; d < days_in_year(y); ++d) {
                const Date date = add_days(start, d);
                const Date last = add_days(date, k);
                bool ok = true;
                for (int j = 1; j <= k; ++j)
                    if (!yset.count(add_days(date, j).year)) ok = false;
                if (ok && yset.count(last.year)) dates.push_back(date);
            }
        }
        return dates;
    }

    // Rollout loss for one sample: mean of the per-step losses over a k-step
    // autoregressive rollout with constraints applied between steps.
    Tensor sample_loss(const Date& init, int k, ForwardCtx& ctx, double* moist_post = nullptr,
                       double* dry_post = nullptr) {
        Tensor x = assemble_input(archive_, init, catalog_);
        Tensor total = Tensor::scalar(0.0);
        for (int j = 1; j <= k; ++j) {
            auto [pred, reports] = model_step(net_, rt_, x, ctx);
            for (const auto& r : reports) {
                if (r.budget == "moisture" && moist_post) *moist_post += std::abs(r.post_residual);
                if (r.budget == "dry_mass" && dry_post) *dry_post += std::abs(r.post_residual);
            }
            const Date td = add_days(init, j);
            Tensor target = rt_.normalizer.normalize_output(assemble_target(archive_, td, catalog_));
            Tensor step_loss = latitude_weighted_mse(rt_.normalizer.normalize_output(pred), target,
                                                     archive_.grid().row_weight);
            total = add(total, step_loss);
            if (j < k) x = advance_state(pred, assemble_forcings(archive_, td, catalog_), catalog_);
        }
        return scale(total, 1.0 / static_cast<double>(k));
    }

    // Runs one training phase (single-step when k == 1) from start_epoch to
    // total_epochs; the cosine schedule always spans the whole phase, so a
    // resumed run continues the interrupted one exactly. Returns the history
    // of the epochs it ran.
    TrainHistory run_phase(int k, int total_epochs, const std::string& phase_name,
                           const std::filesystem::path& checkpoint_dir = {}, int start_epoch = 1,
                           int end_epoch = -1) {
        TrainHistory hist;
        if (end_epoch < 0) end_epoch = total_epochs;
        std::vector<Date> train_dates = usable_dates(split_.train, k);
        std::vector<Date> val_dates = usable_dates(split_.val, k);
        if (train_dates.empty()) throw std::invalid_argument("train: no usable training dates");
        const std::int64_t steps_per_epoch =
            (static_cast<std::int64_t>(train_dates.size()) + cfg_.batch_size - 1) / cfg_.batch_size;
        const std::int64_t total_steps = steps_per_epoch * total_epochs;
        if (start_epoch <= 1) {
            best_val_ = std::numeric_limits<double>::infinity();
            best_epoch_ = -1;
            since_best_ = 0;
        }

        for (int epoch = start_epoch; epoch <= end_epoch; ++epoch) {
            // Shuffle a canonical copy so the ordering is a pure function of
            // the rng stream state (checkpoint resume reproduces it).
            std::vector<Date> order = train_dates;
            std::shuffle(order.begin(), order.end(), shuffle_rng_);
            double epoch_loss = 0.0;
            std::int64_t epoch_batches = 0;
            for (std::size_t b0 = 0; b0 < order.size(); b0 += static_cast<std::size_t>(cfg_.batch_size)) {
                const std::size_t b1 = std::min(order.size(), b0 + static_cast<std::size_t>(cfg_.batch_size));
                const double lr = cosine_lr(sched_step_, total_steps, cfg_.lr_max, cfg_.lr_min);
                net_.store().zero_grad();
                ForwardCtx ctx;
                ctx.training = true;
                ctx.update_spectral = net_.config().use_spectral_norm;
                ctx.rng = &dropout_rng_;
                double moist_post = 0.0, dry_post = 0.0;
                Tensor batch_loss = Tensor::scalar(0.0);
                for (std::size_t i = b0; i < b1; ++i)
                    batch_loss = add(batch_loss, sample_loss(order[i], k, ctx, &moist_post, &dry_post));
                batch_loss = scale(batch_loss, 1.0 / static_cast<double>(b1 - b0));
                const double loss_val = batch_loss.item();
                if (!std::isfinite(loss_val))
                    throw NumericIncident("non-finite training loss at phase " + phase_name + " epoch " +
                                          std::to_string(epoch) + " step " + std::to_string(sched_step_));
                batch_loss.backward();
                const double gn = grad_norm();
                adamw_step(net_.store(), opt_, lr, cfg_.l2, cfg_.beta1, cfg_.beta2, cfg_.eps);
                ++sched_step_;
                epoch_loss += loss_val;
                ++epoch_batches;
                StepRecord rec{phase_name, epoch, sched_step_, lr, loss_val, gn,
                               moist_post / static_cast<double>((b1 - b0) * k),
                               dry_post / static_cast<double>((b1 - b0) * k)};
                hist.steps.push_back(rec);
                if (log_)
                    (*log_) << "step phase=" << phase_name << " epoch=" << epoch << " step=" << sched_step_
                            << " lr=" << rec.lr << " loss=" << rec.loss << " grad_norm=" << rec.grad_norm
                            << " moist_post=" << rec.moist_post << " dry_post=" << rec.dry_post << "\n";
            }

            EpochRecord er;
            er.phase = phase_name;
            er.epoch = epoch;
            er.train_loss = epoch_loss / static_cast<double>(std::max<std::int64_t>(1, epoch_batches));
            er.val_loss = val_dates.empty() ? er.train_loss : evaluate_loss(val_dates, k);
            if (er.val_loss < best_val_) {
                best_val_ = er.val_loss;
                best_epoch_ = epoch;
                er.best = true;
                since_best_ = 0;
                if (!checkpoint_dir.empty()) save_checkpoint(checkpoint_dir / (phase_name + "_best"), phase_name, epoch);
            } else {
                ++since_best_;
            }
            hist.epochs.push_back(er);
            if (log_)
                (*log_) << "epoch phase=" << phase_name << " epoch=" << epoch << " train=" << er.train_loss
                        << " val=" << er.val_loss << (er.best ? " best=1" : "") << "\n";
            if (cfg_.early_stop_patience > 0 && since_best_ >= cfg_.early_stop_patience) break;
        }
        hist.best_val = best_val_;
        hist.best_epoch = best_epoch_;
        if (!checkpoint_dir.empty())
            save_checkpoint(checkpoint_dir / (phase_name + "_last"), phase_name, end_epoch);
        return hist;
    }

    // Validation/test loss without gradients or dropout.
    double evaluate_loss(const std::vector<Date>& dates, int k) {
        NoGradGuard ng;
        ForwardCtx ctx;  // eval: no dropout, frozen power iteration
        double acc = 0.0;
        for (const Date& d : dates) acc += sample_loss(d, k, ctx).item();
        return acc / static_cast<double>(dates.size());
    }

    double grad_norm() const {
        double acc = 0.0;
        for (const auto& [n, t] : net_.store().params) {
            if (!t.has_grad()) continue;
            for (double g : t.grad()) acc += g * g;
        }
        return std::sqrt(acc);
    }

    // --- checkpointing -------------------------------------------------------

    void save_checkpoint(const std::filesystem::path& dir, const std::string& phase, int epoch) const {
        namespace fs = std::filesystem;
        fs::create_directories(dir / "p");
        fs::create_directories(dir / "sn");
        fs::create_directories(dir / "m");
        fs::create_directories(dir / "v");
        std::ofstream mf(dir / "manifest.txt");
        if (!mf) throw std::runtime_error("checkpoint: cannot write manifest");
        mf << "droughtcast_checkpoint 1\n";
        mf << "catalog_hash " << std::hex << catalog_.hash() << std::dec << "\n";
        mf << "config_begin\n" << net_.config().to_text() << "config_end\n";
        mf << "phase " << phase << "\n";
        mf << "epoch " << epoch << "\n";
        mf << "opt_step " << opt_.step << "\n";
        mf << "schedule_step " << sched_step_ << "\n";
        mf << "best_val " << grd1::fmt_g17(best_val_) << "\n";
        mf << "best_epoch " << best_epoch_ << "\n";
        mf << "since_best " << since_best_ << "\n";
        mf << "rng_shuffle " << shuffle_rng_ << "\n";
        mf << "rng_dropout " << dropout_rng_ << "\n";
        for (const auto& [name, t] : net_.store().params) {
            mf << "param " << name;
            for (int e : t.shape()) mf << " " << e;
            mf << "\n";
            ckpt::write_f64(dir / "p" / (name + ".f64"), t.values());
        }
        for (const auto& [name, st] : net_.store().spectral) {
            mf << "spectral " << name << " " << st.u.size() << " " << st.v.size() << "\n";
            ckpt::write_f64(dir / "sn" / (name + ".u.f64"), st.u);
            ckpt::write_f64(dir / "sn" / (name + ".v.f64"), st.v);
        }
        for (const auto& [name, m] : opt_.m) {
            if (m.empty()) continue;
            mf << "moment " << name << " " << m.size() << "\n";
            ckpt::write_f64(dir / "m" / (name + ".f64"), m);
            ckpt::write_f64(dir / "v" / (name + ".f64"), opt_.v.at(name));
        }
    }

    // Restores parameters, moments, schedule position and rng streams.
    // phase/epoch markers are returned so a caller can resume the loop.
    std::pair<std::string, int> load_checkpoint(const std::filesystem::path& dir) {
        std::ifstream mf(dir / "manifest.txt");
        if (!mf) throw std::runtime_error("checkpoint: missing manifest in " + dir.string());
        std::string line;
        std::getline(mf, line);
        if (line.rfind("droughtcast_checkpoint", 0) != 0)
            throw std::runtime_error("checkpoint: bad magic");
        std::string phase = "?";
        int epoch = 0;
        std::string config_text;
        while (std::getline(mf, line)) {
            std::istringstream is(line);
            std::string key;
            is >> key;
            if (key == "catalog_hash") {
                std::uint64_t h = 0;
                is >> std::hex >> h >> std::dec;
                if (h != catalog_.hash()) throw std::runtime_error("checkpoint: catalog mismatch");
            } else if (key == "config_begin") {
                while (std::getline(mf, line) && line != "config_end") config_text += line + "\n";
                if (config_text != net_.config().to_text())
                    throw std::runtime_error("checkpoint: model config mismatch");
            } else if (key == "phase") {
                is >> phase;
            } else if (key == "epoch") {
                is >> epoch;
            } else if (key == "opt_step") {
                is >> opt_.step;
            } else if (key == "schedule_step") {
                is >> sched_step_;
            } else if (key == "best_val") {
                is >> best_val_;
            } else if (key == "best_epoch") {
                is >> best_epoch_;
            } else if (key == "since_best") {
                is >> since_best_;
            } else if (key == "rng_shuffle") {
                is >> shuffle_rng_;
            } else if (key == "rng_dropout") {
                is >> dropout_rng_;
            } else if (key == "param") {
                std::string name;
                is >> name;
                Shape shape;
                int e;
                while (is >> e) shape.push_back(e);
                auto it = net_.store().params.find(name);
                if (it == net_.store().params.end())
                    throw std::runtime_error("checkpoint: unknown parameter " + name);
                if (it->second.shape() != shape) throw std::runtime_error("checkpoint: shape mismatch for " + name);
                it->second.mutable_values() = ckpt::read_f64(dir / "p" / (name + ".f64"), it->second.numel());
                it->second.zero_grad();
            } else if (key == "spectral") {
                std::string name;
                std::size_t nu, nv;
                is >> name >> nu >> nv;
                auto it = net_.store().spectral.find(name);
                if (it == net_.store().spectral.end())
                    throw std::runtime_error("checkpoint: unknown spectral state " + name);
                it->second.u = ckpt::read_f64(dir / "sn" / (name + ".u.f64"), nu);
                it->second.v = ckpt::read_f64(dir / "sn" / (name + ".v.f64"), nv);
            } else if (key == "moment") {
                std::string name;
                std::size_t n;
                is >> name >> n;
                opt_.m[name] = ckpt::read_f64(dir / "m" / (name + ".f64"), n);
                opt_.v[name] = ckpt::read_f64(dir / "v" / (name + ".f64"), n);
            }
        }
        return {phase, epoch};
    }

  private:
    CrossFormerNet& net_;
    const Archive& archive_;
    const VariableCatalog& catalog_;
    DatasetSplit split_;
    TrainConfig cfg_;
    ModelRuntime rt_;
    AdamWState opt_;
    std::int64_t sched_step_ = 0;
    double best_val_ = std::numeric_limits<double>::infinity();
    int best_epoch_ = -1;
    int since_best_ = 0;
    std::mt19937_64 shuffle_rng_, dropout_rng_;
    std::ostream* log_ = nullptr;
    std::uint64_t seed_ = 0;
};

}  // namespace droughtcast
