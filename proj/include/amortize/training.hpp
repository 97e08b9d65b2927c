#pragma once

// Joint training of the generative parameters and the inference
// strategy. Every update step of an iterative strategy accumulates the
// bound gradient taken at its own output; the generative side is updated
// from the final iterate. Batches run examples in parallel but gradients
// are summed in example order, so results do not depend on the thread
// count.

#include <chrono>
#include <thread>

#include "data_io.hpp"
#include "inference.hpp"

namespace amortize {

struct TrainConfig {
    std::size_t epochs = 50;
    std::size_t batch_size = 64;
    std::size_t iterations = 16;  // inference updates per example
    std::size_t samples = 1;      // posterior samples per evaluation
    double lr_theta = 2e-4;
    double lr_phi = 2e-4;
    double lr_decay = 0.999;           // per epoch, exact power law
    std::size_t kl_anneal_epochs = 0;  // 0 disables annealing
    std::uint64_t seed = 0;
    bool binarize = false;             // resample Bernoulli pixels every epoch
    bool phi_average = false;          // average the per-iteration sum over T
    bool theta_all_iterations = false; // accumulate theta at every iteration (ablation)
    std::size_t threads = 0;           // 0 = hardware concurrency
    std::size_t val_cap = 0;           // 0 = use the whole validation split
};

// Linear ramp over the first kl_anneal_epochs epochs.
inline double anneal_weight(std::size_t epoch, std::size_t kl_anneal_epochs) {
    check_dim(epoch >= 1, "anneal epoch >= 1");
    if (kl_anneal_epochs == 0) return 1.0;
    return std::min(1.0, static_cast<double>(epoch) / static_cast<double>(kl_anneal_epochs));
}

struct EpochRow {
    std::size_t epoch = 0;
    std::string split;
    double elbo = 0.0;
    double recon = 0.0;
    double kl = 0.0;
    Vec grad_norms;  // mean gradient norm at inference iterations 1..T
    double seconds = 0.0;
};

struct TrainReport {
    std::size_t iterations = 0;
    std::vector<EpochRow> rows;
    std::size_t skipped_batches = 0;
    std::size_t total_batches = 0;
};

inline std::string train_report_csv(const TrainReport& r, bool wall_clock = false) {
    std::string out = "#schema=train_report.v1\n";
    out += "epoch,split,elbo,recon,kl";
    for (std::size_t t = 1; t <= r.iterations; ++t) out += ",grad_norm_t" + std::to_string(t);
    out += ",seconds\n";
    for (const auto& row : r.rows) {
        out += std::to_string(row.epoch) + ',' + row.split + ',' + fmt(row.elbo) + ',' +
               fmt(row.recon) + ',' + fmt(row.kl);
        for (std::size_t t = 0; t < r.iterations; ++t)
            out += ',' + fmt(t < row.grad_norms.size() ? row.grad_norms[t] : 0.0);
        out += ',' + fmt(wall_clock ? row.seconds : 0.0) + '\n';
    }
    return out;
}

namespace detail {

// Per-example result produced inside a batch.
struct ExampleWork {
    PhiGrad phi;
    ThetaGrad theta;
    ElboBreakdown bound;
    Vec grad_norms;  // per iteration 1..T
    bool ok = false;
    std::string what;
};

struct Objective {
    double elbo = 0.0;
    double recon = 0.0;
    double kl = 0.0;
};

inline Vec example_input(const Dataset& data, std::size_t idx, bool binarize, std::uint64_t seed,
                         std::size_t epoch) {
    Vec x = data.example(idx);
    if (binarize) {
        Rng br = Rng(seed).child(stream::kBinarize, epoch, idx);
        x = dynamic_binarize(x, br);
    }
    return x;
}

// One example's gradients under the current parameters.
inline void train_example(const GenerativeModel& m, const InferenceStrategy& s, const Vec& x,
                          const TrainConfig& cfg, double kl_w, Rng rng, ExampleWork& w) {
    w.ok = false;
    try {
        switch (s.cfg.kind) {
            case StrategyKind::Iterative: {
                IterativeInferOpts opts;
                opts.kl_weight = kl_w;
                opts.phi_accum = &w.phi;
                opts.theta_accum = &w.theta;
                InferenceTrajectory traj =
                    iterative_infer(s, m, x, cfg.iterations, cfg.samples, rng, opts);
                if (traj.truncated) {
                    w.what = traj.diagnostic;
                    return;
                }
                if (cfg.theta_all_iterations) {
                    // Ablation: add the generative gradient at every iterate
                    // (the loop above already added the final one).
                    for (std::size_t t = 0; t + 1 < traj.records.size(); ++t) {
                        Rng nr = rng.child(stream::kNoise, t);
                        Noises noises = draw_noises(m, cfg.samples, nr);
                        grad_lambda(m, x, traj.records[t].lambda, noises, KlMode::Analytic, kl_w,
                                    &w.theta);
                    }
                }
                if (cfg.phi_average) {
                    double inv_t = 1.0 / static_cast<double>(cfg.iterations);
                    for (auto& n : w.phi.nets) scale_grad(n, inv_t);
                }
                // Report the final-iterate bound and the per-iteration
                // mean-gradient norms (records 1..T).
                Rng nr = rng.child(stream::kNoise, cfg.iterations);
                Noises noises = draw_noises(m, cfg.samples, nr);
                w.bound = elbo(m, x, traj.records.back().lambda, noises, KlMode::Analytic, kl_w);
                w.grad_norms.resize(cfg.iterations);
                for (std::size_t t = 1; t < traj.records.size(); ++t)
                    w.grad_norms[t - 1] = traj.records[t].grad_norm_mean;
                break;
            }
            case StrategyKind::Standard: {
                StandardTape tape;
                PosteriorEstimate lam = standard_infer(s, m, x, &tape);
                Rng nr = rng.child(stream::kNoise, 0);
                Noises noises = draw_noises(m, cfg.samples, nr);
                ElboBreakdown b;
                GradientSignals g =
                    grad_lambda(m, x, lam, noises, KlMode::Analytic, kl_w, &w.theta, &b);
                standard_backward(s, m, tape, g, w.phi);
                w.bound = b;
                w.grad_norms.assign(cfg.iterations, 0.0);
                if (!w.grad_norms.empty()) w.grad_norms[0] = detail::grad_norm_means(g);
                break;
            }
            case StrategyKind::Optimizer: {
                OptimizerInferOpts oi;
                oi.kl_weight = kl_w;
                InferenceTrajectory traj = optimizer_infer(s.cfg.optimizer, s.cfg.lr, m, x,
                                                           init_lambda(m, s.cfg.init, &s),
                                                           cfg.iterations, cfg.samples, rng, oi);
                if (traj.truncated) {
                    w.what = traj.diagnostic;
                    return;
                }
                Rng nr = rng.child(stream::kNoise, cfg.iterations);
                Noises noises = draw_noises(m, cfg.samples, nr);
                grad_lambda(m, x, traj.records.back().lambda, noises, KlMode::Analytic, kl_w,
                            &w.theta, &w.bound);
                w.grad_norms.resize(cfg.iterations);
                for (std::size_t t = 1; t < traj.records.size(); ++t)
                    w.grad_norms[t - 1] = traj.records[t].grad_norm_mean;
                break;
            }
        }
        w.ok = true;
    } catch (const std::exception& ex) {
        w.what = ex.what();
    }
}

}  // namespace detail

// Mean validation bound (and per-iteration statistics) under the
// strategy, one sample per evaluation.
inline EpochRow validation_row(const GenerativeModel& m, const InferenceStrategy& s,
                               const Dataset& val, const TrainConfig& cfg, std::size_t epoch) {
    EpochRow row;
    row.epoch = epoch;
    row.split = "val";
    std::size_t n = val.size();
    if (cfg.val_cap > 0) n = std::min(n, cfg.val_cap);
    row.grad_norms.assign(cfg.iterations, 0.0);
    std::size_t used = 0;
    for (std::size_t i = 0; i < n; ++i) {
        // Validation binarization is epoch-independent so the numbers stay
        // comparable across the run.
        Vec x = detail::example_input(val, i, cfg.binarize, cfg.seed ^ 0x5a11ULL, 0);
        Rng rng = Rng(cfg.seed).child(stream::kEval, epoch, i);
        ElboBreakdown b;
        switch (s.cfg.kind) {
            case StrategyKind::Iterative: {
                InferenceTrajectory traj = iterative_infer(s, m, x, cfg.iterations, 1, rng);
                if (traj.truncated) continue;
                Rng nr = rng.child(stream::kNoise, cfg.iterations);
                Noises noises = draw_noises(m, 1, nr);
                b = elbo(m, x, traj.records.back().lambda, noises, KlMode::Analytic);
                for (std::size_t t = 1; t < traj.records.size(); ++t)
                    row.grad_norms[t - 1] += traj.records[t].grad_norm_mean;
                break;
            }
            case StrategyKind::Standard: {
                PosteriorEstimate lam = standard_infer(s, m, x);
                Rng nr = rng.child(stream::kNoise, 0);
                Noises noises = draw_noises(m, 1, nr);
                b = elbo(m, x, lam, noises, KlMode::Analytic);
                break;
            }
            case StrategyKind::Optimizer: {
                InferenceTrajectory traj =
                    optimizer_infer(s.cfg.optimizer, s.cfg.lr, m, x, init_lambda(m, s.cfg.init, &s),
                                    cfg.iterations, 1, rng);
                if (traj.truncated) continue;
                Rng nr = rng.child(stream::kNoise, cfg.iterations);
                Noises noises = draw_noises(m, 1, nr);
                b = elbo(m, x, traj.records.back().lambda, noises, KlMode::Analytic);
                for (std::size_t t = 1; t < traj.records.size(); ++t)
                    row.grad_norms[t - 1] += traj.records[t].grad_norm_mean;
                break;
            }
        }
        double kl_sum = 0;
        for (double v : b.kl_per_level) kl_sum += v;
        row.elbo += b.total;
        row.recon += b.recon;
        row.kl += kl_sum;
        ++used;
    }
    if (used > 0) {
        double inv = 1.0 / static_cast<double>(used);
        row.elbo *= inv;
        row.recon *= inv;
        row.kl *= inv;
        for (auto& v : row.grad_norms) v *= inv;
    }
    return row;
}

inline TrainReport train(GenerativeModel& m, InferenceStrategy& s, const Dataset& train_data,
                         const Dataset& val_data, const TrainConfig& cfg) {
    TrainReport report;
    report.iterations = cfg.iterations;
    const std::size_t nthreads =
        cfg.threads > 0 ? cfg.threads : std::max(1u, std::thread::hardware_concurrency());

    AdamState theta_state, phi_state;
    visit_model_params(m, [&](Vec& v) { theta_state.register_group(v.size()); });
    visit_strategy_params(s, [&](Vec& v) { phi_state.register_group(v.size()); });
    theta_state.cfg.lr = cfg.lr_theta;
    phi_state.cfg.lr = cfg.lr_phi;

    std::vector<detail::ExampleWork> work(cfg.batch_size);

    for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
        auto epoch_start = std::chrono::steady_clock::now();
        const double kl_w = anneal_weight(epoch, cfg.kl_anneal_epochs);
        const double decay = std::pow(cfg.lr_decay, static_cast<double>(epoch - 1));
        theta_state.cfg.lr = cfg.lr_theta * decay;
        phi_state.cfg.lr = cfg.lr_phi * decay;

        auto idx_batches = batches(train_data.size(), cfg.batch_size, Rng(cfg.seed).child(stream::kShuffle, epoch));
        detail::Objective epoch_obj;
        Vec epoch_norms(cfg.iterations, 0.0);
        std::size_t epoch_examples = 0;

        for (std::size_t bi = 0; bi < idx_batches.size(); ++bi) {
            const auto& batch = idx_batches[bi];
            report.total_batches += 1;
            for (std::size_t j = 0; j < batch.size(); ++j) {
                work[j].phi = make_phi_grad(s);
                work[j].theta = make_theta_grad(m);
            }
            auto run_range = [&](std::size_t lo, std::size_t hi) {
                for (std::size_t j = lo; j < hi; ++j) {
                    std::size_t idx = batch[j];
                    Vec x = detail::example_input(train_data, idx, cfg.binarize, cfg.seed, epoch);
                    Rng rng = Rng(cfg.seed).child(epoch, bi, j);
                    detail::train_example(m, s, x, cfg, kl_w, rng, work[j]);
                }
            };
            if (nthreads <= 1 || batch.size() < 2) {
                run_range(0, batch.size());
            } else {
                std::vector<std::thread> pool;
                std::size_t chunk = (batch.size() + nthreads - 1) / nthreads;
                for (std::size_t t = 0; t < nthreads; ++t) {
                    std::size_t lo = t * chunk, hi = std::min(batch.size(), lo + chunk);
                    if (lo >= hi) break;
                    pool.emplace_back(run_range, lo, hi);
                }
                for (auto& th : pool) th.join();
            }

            bool batch_ok = true;
            for (std::size_t j = 0; j < batch.size(); ++j) batch_ok = batch_ok && work[j].ok;
            if (!batch_ok) {
                report.skipped_batches += 1;
                if (report.skipped_batches * 100 > report.total_batches &&
                    report.skipped_batches > 1)
                    throw std::runtime_error("train: more than 1% of batches skipped (" +
                                             std::to_string(report.skipped_batches) + " of " +
                                             std::to_string(report.total_batches) + ")");
                continue;
            }

            // Deterministic reduction: sum in example order, then average.
            PhiGrad phi_sum = make_phi_grad(s);
            ThetaGrad theta_sum = make_theta_grad(m);
            const double inv_b = 1.0 / static_cast<double>(batch.size());
            for (std::size_t j = 0; j < batch.size(); ++j) {
                add_phi(phi_sum, work[j].phi, inv_b);
                for (std::size_t d = 0; d < theta_sum.decoders.size(); ++d)
                    add_grad(theta_sum.decoders[d], work[j].theta.decoders[d], inv_b);
                for (std::size_t i = 0; i < theta_sum.output_log_var.size(); ++i)
                    theta_sum.output_log_var[i] += inv_b * work[j].theta.output_log_var[i];
                double kl_sum = 0;
                for (double v : work[j].bound.kl_per_level) kl_sum += v;
                epoch_obj.elbo += work[j].bound.total;
                epoch_obj.recon += work[j].bound.recon;
                epoch_obj.kl += kl_sum;
                for (std::size_t t = 0; t < cfg.iterations && t < work[j].grad_norms.size(); ++t)
                    epoch_norms[t] += work[j].grad_norms[t];
                epoch_examples += 1;
            }

            // Ascent on the bound: negate for the descent-form update.
            std::vector<Vec*> params;
            std::vector<Vec> grads_neg;
            std::vector<const Vec*> grads;
            visit_model_params(m, [&](Vec& v) { params.push_back(&v); });
            visit_theta_grads(m, theta_sum, [&](Vec& v) {
                for (auto& g : v) g = -g;
                grads_neg.push_back(std::move(v));
            });
            for (auto& g : grads_neg) grads.push_back(&g);
            adam_step(params, grads, theta_state);
            for (auto& lv : m.output_log_var) lv = clamp(lv, kLogVarMin, kLogVarMax);

            params.clear();
            grads.clear();
            grads_neg.clear();
            visit_strategy_params(s, [&](Vec& v) { params.push_back(&v); });
            visit_phi_grads(s, phi_sum, [&](Vec& v) {
                for (auto& g : v) g = -g;
                grads_neg.push_back(std::move(v));
            });
            for (auto& g : grads_neg) grads.push_back(&g);
            if (!params.empty()) adam_step(params, grads, phi_state);
        }

        EpochRow row;
        row.epoch = epoch;
        row.split = "train";
        if (epoch_examples > 0) {
            double inv = 1.0 / static_cast<double>(epoch_examples);
            row.elbo = epoch_obj.elbo * inv;
            row.recon = epoch_obj.recon * inv;
            row.kl = epoch_obj.kl * inv;
            row.grad_norms = epoch_norms;
            for (auto& v : row.grad_norms) v *= inv;
        }
        row.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - epoch_start).count();
        report.rows.push_back(row);

        EpochRow vrow = validation_row(m, s, val_data, cfg, epoch);
        vrow.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - epoch_start).count();
        report.rows.push_back(vrow);
    }
    return report;
}

}  // namespace amortize
