#include "parbeam/training.hpp"

#include <cmath>
#include <limits>

#include "parbeam/rng.hpp"

namespace parbeam::train {

namespace {

constexpr std::uint64_t kJointShuffleTag = 0x6a6f696e742d7368ull; // distinct stream ids
constexpr std::uint64_t kSeqShuffleTag = 0x7365712d73687566ull;

void check_config(const TrainConfig& cfg) {
    if (cfg.outer < 0) throw ParamError("TrainConfig: outer iteration count must be >= 0");
    if (cfg.inner < 1) throw ParamError("TrainConfig: inner iteration count must be >= 1");
    if (!(cfg.beta >= 0)) throw ParamError("TrainConfig: beta must be >= 0");
    if (cfg.epochs < 0) throw ParamError("TrainConfig: epoch count must be >= 0");
}

void check_sample(const TrainingSample& s, const char* what) {
    if (!s.model) throw ParamError(std::string(what) + ": sample has no system model");
    const Shape3& sh = s.model->vol_shape();
    if (!(s.x0.shape == sh) || !(s.x_true.shape == sh))
        throw ShapeError(std::string(what) + ": sample volumes do not match the model shape");
}

double finite_or_throw(double v, const std::string& where) {
    if (!std::isfinite(v)) throw TrainingError(where + ": non-finite value");
    return v;
}

} // namespace

Method method_from_name(const std::string& name) {
    if (name == "seq" || name == "sequential") return Method::sequential;
    if (name == "trunc" || name == "truncation") return Method::truncation;
    if (name == "e2e" || name == "end2end") return Method::end2end;
    throw ParamError("unknown training method \"" + name + "\" (expected seq, trunc, or e2e)");
}

const char* method_name(Method m) {
    switch (m) {
        case Method::sequential: return "sequential";
        case Method::truncation: return "truncation";
        default: return "end2end";
    }
}

double mean_squared_error(const Vol3<double>& a, const Vol3<double>& b) {
    if (!(a.shape == b.shape) || a.data.size() != b.data.size())
        throw ShapeError("mean_squared_error: shapes differ");
    if (a.data.empty()) throw ShapeError("mean_squared_error: empty volumes");
    double acc = 0.0;
    for (std::size_t t = 0; t < a.data.size(); ++t) {
        const double d = a.data[t] - b.data[t];
        acc += d * d;
    }
    return acc / double(a.data.size());
}

Vol3<double> osem_warm_start(const recon::PoissonProblem<double>& prob, int n_iter, int n_subsets) {
    Vol3<double> x0 = prob.model.make_volume();
    for (auto& v : x0.data) v = 1.0;
    return recon::osem(prob, x0, n_iter, n_subsets);
}

Vol3<double> unrolled_forward(const recon::PoissonProblem<double>& prob, const Vol3<double>& x0,
                              const std::vector<nn::NetworkWeights>& nets, const TrainConfig& cfg,
                              UnrolledTape& tape) {
    check_config(cfg);
    recon::validate_problem(prob, "unrolled_forward");
    const auto& model = prob.model;
    if (int(nets.size()) != cfg.outer)
        throw ParamError("unrolled_forward: need exactly one network per outer iteration");
    if (!(x0.shape == model.vol_shape()))
        throw ShapeError("unrolled_forward: x0 shape does not match model");
    validate_nonnegative(x0, "unrolled_forward x0");

    tape = UnrolledTape{};
    tape.shape = model.vol_shape();
    const std::size_t n = tape.shape.total();

    Views3<double> ones = model.make_views();
    for (auto& v : ones.data) v = 1.0;
    Vol3<double> sens = model.make_volume();
    model.back(ones, sens);
    tape.sens = sens.data;

    Vol3<double> x = x0;
    Views3<double> q = model.make_views();
    Views3<double> ratio = model.make_views();
    Vol3<double> e = model.make_volume();
    tape.outer.resize(std::size_t(cfg.outer));
    for (int k = 0; k < cfg.outer; ++k) {
        auto& rec = tape.outer[std::size_t(k)];
        Vol3<double> u;
        nn::regularizer_forward(x, nets[std::size_t(k)], u, rec.reg_tape);
        rec.u = u.data;
        rec.d.resize(n);
        for (std::size_t t = 0; t < n; ++t) rec.d[t] = tape.sens[t] - cfg.beta * rec.u[t];
        rec.inner.resize(std::size_t(cfg.inner));
        for (int it = 0; it < cfg.inner; ++it) {
            auto& st = rec.inner[std::size_t(it)];
            st.z = x.data;
            model.forward(x, q);
            st.q = q.data;
            recon::detail::measurement_ratio(prob, q, ratio, nullptr, model.nview());
            model.back(ratio, e);
            st.e = e.data;
            for (std::size_t t = 0; t < n; ++t) {
                if (tape.sens[t] < recon::kSensitivityFloor) {
                    x.data[t] = 0.0;
                    continue;
                }
                const double c = x.data[t] * e.data[t];
                x.data[t] = recon::detail::stable_em_root(c, rec.d[t], cfg.beta);
            }
        }
    }
    tape.x_final = x.data;
    tape.valid = true;
    return x;
}

namespace {

/// Shared reverse sweep; truncate cuts the two projector edges per inner
/// step (the pullbacks through e = A'(ratio) and q = A z).
std::vector<nn::NetworkWeights> unrolled_gradient(const UnrolledTape& tape,
                                                  const Vol3<double>& target,
                                                  const recon::PoissonProblem<double>& prob,
                                                  const std::vector<nn::NetworkWeights>& nets,
                                                  const TrainConfig& cfg, bool truncate,
                                                  double* loss_out) {
    if (!tape.valid) throw UsageError("unrolled gradient: tape not from unrolled_forward");
    check_config(cfg);
    const auto& model = prob.model;
    if (!(tape.shape == model.vol_shape()))
        throw ShapeError("unrolled gradient: tape does not match the problem's model");
    if (int(tape.outer.size()) != cfg.outer || int(nets.size()) != cfg.outer)
        throw ParamError("unrolled gradient: tape/network count does not match cfg.outer");
    if (!(target.shape == tape.shape))
        throw ShapeError("unrolled gradient: target shape does not match tape");
    const std::size_t n = tape.shape.total();
    const int K = cfg.outer;
    const double beta = cfg.beta;

    double loss = 0.0;
    std::vector<double> xbar(n);
    for (std::size_t t = 0; t < n; ++t) {
        const double diff = tape.x_final[t] - target.data[t];
        loss += diff * diff;
        xbar[t] = 2.0 * diff / double(n);
    }
    loss /= double(n);
    if (loss_out) *loss_out = finite_or_throw(loss, "unrolled gradient: loss");

    std::vector<nn::NetworkWeights> grads(static_cast<std::size_t>(K));
    if (K == 0) return grads;

    std::vector<double> zbar(n), dbar(n);
    Vol3<double> ebar = model.make_volume();
    Vol3<double> from_adjoint = model.make_volume();
    Vol3<double> ubar = model.make_volume();
    Vol3<double> gx = model.make_volume();
    Views3<double> ratio_bar = model.make_views();
    Views3<double> qbar = model.make_views();

    for (int k = K - 1; k >= 0; --k) {
        const auto& rec = tape.outer[std::size_t(k)];
        if (int(rec.inner.size()) != cfg.inner)
            throw UsageError("unrolled gradient: tape inner step count does not match cfg.inner");
        std::fill(dbar.begin(), dbar.end(), 0.0);
        for (int it = cfg.inner - 1; it >= 0; --it) {
            const auto& st = rec.inner[std::size_t(it)];
            // elementwise pullback of the EM root: with tau = sqrt(d^2+4*beta*c)
            // and r the root, dr/dc = 1/tau and dr/dd = -r/tau on both
            // stable branches.
            for (std::size_t t = 0; t < n; ++t) {
                zbar[t] = 0.0;
                ebar.data[t] = 0.0;
                if (tape.sens[t] < recon::kSensitivityFloor) continue; // pinned voxel
                const double z = st.z[t], e = st.e[t], d = rec.d[t];
                const double craw = z * e;
                const double c = craw < 0.0 ? 0.0 : craw;
                const double tau = std::sqrt(d * d + 4.0 * beta * c);
                if (!(tau > 0.0)) continue; // flat point of the root
                const double g = xbar[t];
                const double r = recon::detail::stable_em_root(c, d, beta);
                const double cbar = g / tau;
                dbar[t] += g * (-r / tau);
                if (craw >= 0.0) { // clamped negatives carry no gradient
                    zbar[t] += cbar * e;
                    ebar.data[t] = cbar * z;
                }
            }
            if (!truncate) {
                // pullback through e = A'(ratio): ratio_bar = A(ebar)
                model.forward(ebar, ratio_bar);
                // ratio = y ./ max(q + r_bar, floor)
                for (std::size_t b = 0; b < ratio_bar.data.size(); ++b) {
                    const double m = st.q[b] + prob.r_bar.data[b];
                    qbar.data[b] = m < recon::kMeanFloor
                                       ? 0.0
                                       : ratio_bar.data[b] * (-prob.y.data[b] / (m * m));
                }
                // pullback through q = A z: zbar += A'(qbar)
                model.back(qbar, from_adjoint);
                for (std::size_t t = 0; t < n; ++t) zbar[t] += from_adjoint.data[t];
            }
            std::swap(xbar, zbar);
        }
        // d = A'(1) - beta * u: the sensitivity is constant, u carries -beta
        for (std::size_t t = 0; t < n; ++t) ubar.data[t] = -beta * dbar[t];
        nn::regularizer_backward(rec.reg_tape, nets[std::size_t(k)], ubar, gx,
                                 grads[std::size_t(k)]);
        for (std::size_t t = 0; t < n; ++t) {
            xbar[t] += gx.data[t];
            if (!std::isfinite(xbar[t]))
                throw TrainingError("unrolled gradient: non-finite iterate gradient at outer " +
                                    std::to_string(k));
        }
    }
    return grads;
}

double joint_validation_mse(const std::vector<TrainingSample>& valid_set,
                            const std::vector<nn::NetworkWeights>& nets, const TrainConfig& cfg) {
    if (valid_set.empty()) return std::numeric_limits<double>::quiet_NaN();
    double acc = 0.0;
    for (const auto& s : valid_set) {
        recon::PoissonProblem<double> prob{s.y, s.r_bar, *s.model};
        UnrolledTape tape;
        const Vol3<double> xk = unrolled_forward(prob, s.x0, nets, cfg, tape);
        acc += mean_squared_error(xk, s.x_true);
    }
    return acc / double(valid_set.size());
}

void maybe_checkpoint(const std::vector<nn::NetworkWeights>& nets, const TrainConfig& cfg,
                      int epochs_done) {
    if (cfg.checkpoint_every <= 0 || cfg.checkpoint_stem.empty()) return;
    if (epochs_done % cfg.checkpoint_every != 0) return;
    for (std::size_t k = 0; k < nets.size(); ++k)
        nn::save_weights(nets[k], cfg.checkpoint_stem + "_net" + std::to_string(k));
}

} // namespace

std::vector<nn::NetworkWeights> e2e_gradient(const UnrolledTape& tape, const Vol3<double>& target,
                                             const recon::PoissonProblem<double>& prob,
                                             const std::vector<nn::NetworkWeights>& nets,
                                             const TrainConfig& cfg, double* loss_out) {
    return unrolled_gradient(tape, target, prob, nets, cfg, /*truncate=*/false, loss_out);
}

std::vector<nn::NetworkWeights> truncated_gradient(const UnrolledTape& tape,
                                                   const Vol3<double>& target,
                                                   const recon::PoissonProblem<double>& prob,
                                                   const std::vector<nn::NetworkWeights>& nets,
                                                   const TrainConfig& cfg, double* loss_out) {
    return unrolled_gradient(tape, target, prob, nets, cfg, /*truncate=*/true, loss_out);
}

TrainResult sequential_train(const std::vector<TrainingSample>& train_set,
                             const std::vector<TrainingSample>& valid_set,
                             const TrainConfig& cfg) {
    check_config(cfg);
    if (cfg.outer < 1) throw ParamError("sequential_train: need at least one outer iteration");
    if (train_set.empty()) throw ParamError("sequential_train: empty dataset");
    for (const auto& s : train_set) check_sample(s, "sequential_train");
    for (const auto& s : valid_set) check_sample(s, "sequential_train");

    const nn::NetworkWeights init = nn::gaussian_init(cfg.seed);
    TrainResult result;
    result.nets.assign(std::size_t(cfg.outer), init);

    // per-sample current iterates x_k, advanced after each net is frozen
    std::vector<Vol3<double>> xt, xv;
    for (const auto& s : train_set) xt.push_back(s.x0);
    for (const auto& s : valid_set) xv.push_back(s.x0);

    const std::size_t n_train = train_set.size();
    for (int k = 0; k < cfg.outer; ++k) {
        nn::NetworkWeights& net = result.nets[std::size_t(k)];
        nn::OptimState state;
        for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
            const auto order = rng::shuffled_indices(
                int(n_train), cfg.seed,
                kSeqShuffleTag ^ (std::uint64_t(k) << 32) ^ std::uint64_t(epoch));
            double acc = 0.0;
            for (int idx_i : order) {
                const auto idx = std::size_t(idx_i);
                const auto& s = train_set[idx];
                const std::size_t n = s.x_true.data.size();
                nn::Tape tape;
                Vol3<double> u;
                nn::regularizer_forward(xt[idx], net, u, tape);
                Vol3<double> ubar = u;
                double loss = 0.0;
                for (std::size_t t = 0; t < n; ++t) {
                    const double diff = u.data[t] - s.x_true.data[t];
                    loss += diff * diff;
                    ubar.data[t] = 2.0 * diff / double(n);
                }
                acc += loss / double(n);
                nn::NetworkWeights grad;
                Vol3<double> gx;
                nn::regularizer_backward(tape, net, ubar, gx, grad);
                nn::adamw_step(net, grad, state, cfg.adamw);
            }
            result.curve.train_mse.push_back(acc / double(n_train));
            if (valid_set.empty()) {
                result.curve.valid_mse.push_back(std::numeric_limits<double>::quiet_NaN());
            } else {
                double vacc = 0.0;
                for (std::size_t i = 0; i < valid_set.size(); ++i)
                    vacc += mean_squared_error(nn::regularizer_apply(xv[i], net),
                                               valid_set[i].x_true);
                result.curve.valid_mse.push_back(vacc / double(valid_set.size()));
            }
            maybe_checkpoint(result.nets, cfg, k * cfg.epochs + epoch + 1);
        }
        // freeze net k and advance every sample one unrolled iteration
        auto advance = [&](const TrainingSample& s, Vol3<double>& x) {
            recon::PoissonProblem<double> prob{s.y, s.r_bar, *s.model};
            const Vol3<double> u = nn::regularizer_apply(x, net);
            x = recon::regularized_em_update(x, u, cfg.beta, prob, cfg.inner);
        };
        for (std::size_t i = 0; i < train_set.size(); ++i) advance(train_set[i], xt[i]);
        for (std::size_t i = 0; i < valid_set.size(); ++i) advance(valid_set[i], xv[i]);
    }
    return result;
}

TrainResult train(const std::vector<TrainingSample>& train_set,
                  const std::vector<TrainingSample>& valid_set, const TrainConfig& cfg) {
    check_config(cfg);
    if (cfg.method == Method::sequential) return sequential_train(train_set, valid_set, cfg);
    if (cfg.outer < 1) throw ParamError("train: need at least one outer iteration");
    if (train_set.empty()) throw ParamError("train: empty dataset");
    for (const auto& s : train_set) check_sample(s, "train");
    for (const auto& s : valid_set) check_sample(s, "train");

    TrainResult result;
    result.nets.assign(std::size_t(cfg.outer), nn::gaussian_init(cfg.seed));
    std::vector<nn::OptimState> states(std::size_t(cfg.outer));
    const bool truncate = cfg.method == Method::truncation;

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        const auto order = rng::shuffled_indices(int(train_set.size()), cfg.seed,
                                                 kJointShuffleTag ^ std::uint64_t(epoch));
        double acc = 0.0;
        for (int idx : order) {
            const auto& s = train_set[std::size_t(idx)];
            recon::PoissonProblem<double> prob{s.y, s.r_bar, *s.model};
            UnrolledTape tape;
            unrolled_forward(prob, s.x0, result.nets, cfg, tape);
            double loss = 0.0;
            const auto grads =
                unrolled_gradient(tape, s.x_true, prob, result.nets, cfg, truncate, &loss);
            acc += loss;
            for (int k = 0; k < cfg.outer; ++k)
                nn::adamw_step(result.nets[std::size_t(k)], grads[std::size_t(k)],
                               states[std::size_t(k)], cfg.adamw);
        }
        result.curve.train_mse.push_back(acc / double(train_set.size()));
        result.curve.valid_mse.push_back(joint_validation_mse(valid_set, result.nets, cfg));
        maybe_checkpoint(result.nets, cfg, epoch + 1);
    }
    return result;
}

} // namespace parbeam::train
