#pragma once

/// Training regimes for the unrolled K-iteration CNN-regularized EM
/// reconstruction network.
///
/// One unrolled pass alternates, for k = 0..K-1:
///
///   u_{k+1} = x_k + CNN_k(x_k)          (prior image)
///   x_{k+1} = EM update of x_k toward u_{k+1} (n_inner inner steps)
///
/// Three ways to fit the per-iteration networks:
///  - sequential: train net k to regress x_true from x_k, freeze it, then
///    advance every sample to x_{k+1}; no gradient crosses an EM update;
///  - truncation: backpropagate the final MSE but treat every projector
///    application (forward or adjoint) as constant;
///  - end2end: exact backpropagation, using the projector's linearity: the
///    pullback of v = A x is A'(vbar), and of w = A' v is A(wbar).
///
/// The whole chain is 64-bit so analytic gradients can be validated against
/// central finite differences.

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "parbeam/neural.hpp"
#include "parbeam/projector.hpp"
#include "parbeam/recon.hpp"
#include "parbeam/types.hpp"

namespace parbeam::train {

enum class Method { sequential, truncation, end2end };

Method method_from_name(const std::string& name); // "seq" | "trunc" | "e2e"
const char* method_name(Method m);

struct TrainConfig {
    int outer = 3;  // K, number of unrolled iterations (one net each)
    int inner = 1;  // EM steps per unrolled iteration
    double beta = 1.0;
    int epochs = 0; // per regime; sequential spends this budget per iteration
    nn::AdamWConfig adamw;
    Method method = Method::end2end;
    std::uint64_t seed = 0;
    int checkpoint_every = 0;    // epochs between checkpoints; 0 disables
    std::string checkpoint_stem; // files <stem>_net<k>.{json,raw}
};

/// One training example: measurement, matched background, warm start,
/// ground truth, and the sample's own system operator.
struct TrainingSample {
    std::shared_ptr<const proj::SystemModel<double>> model;
    Views3<double> y;
    Views3<double> r_bar;
    Vol3<double> x0;
    Vol3<double> x_true;
};

/// Everything the backward pass needs from one unrolled forward.
struct UnrolledTape {
    struct InnerStep {
        std::vector<double> z; // iterate entering this EM step
        std::vector<double> q; // A z
        std::vector<double> e; // A'(y ./ (q + r_bar))
    };
    struct Outer {
        nn::Tape reg_tape;          // CNN activations at x_k
        std::vector<double> u;      // prior image u_{k+1}
        std::vector<double> d;      // A'(1) - beta * u
        std::vector<InnerStep> inner;
    };
    Shape3 shape{};
    std::vector<double> sens; // A'(1), shared across iterations
    std::vector<Outer> outer;
    std::vector<double> x_final;
    bool valid = false;
};

double mean_squared_error(const Vol3<double>& a, const Vol3<double>& b);

/// Standard warm start: OSEM from a uniform initial volume.
Vol3<double> osem_warm_start(const recon::PoissonProblem<double>& prob, int n_iter = 16,
                             int n_subsets = 4);

/// Run the unrolled network; nets.size() must equal cfg.outer.  Records the
/// tape needed by either backward mode.
Vol3<double> unrolled_forward(const recon::PoissonProblem<double>& prob, const Vol3<double>& x0,
                              const std::vector<nn::NetworkWeights>& nets, const TrainConfig& cfg,
                              UnrolledTape& tape);

/// Exact gradient of L = mean((x_K - target)^2) with respect to every net's
/// parameters.  loss_out, when non-null, receives L.
std::vector<nn::NetworkWeights> e2e_gradient(const UnrolledTape& tape, const Vol3<double>& target,
                                             const recon::PoissonProblem<double>& prob,
                                             const std::vector<nn::NetworkWeights>& nets,
                                             const TrainConfig& cfg, double* loss_out = nullptr);

/// Same reverse sweep with every projector edge cut: gradients never flow
/// through an A or A' application, only through the elementwise uses of x_k
/// and u_k in the EM root.
std::vector<nn::NetworkWeights> truncated_gradient(const UnrolledTape& tape,
                                                   const Vol3<double>& target,
                                                   const recon::PoissonProblem<double>& prob,
                                                   const std::vector<nn::NetworkWeights>& nets,
                                                   const TrainConfig& cfg,
                                                   double* loss_out = nullptr);

/// Per-epoch loss history; for sequential training the per-iteration
/// histories are concatenated in iteration order.
struct LossCurve {
    std::vector<double> train_mse;
    std::vector<double> valid_mse;
};

struct TrainResult {
    std::vector<nn::NetworkWeights> nets;
    LossCurve curve;
};

/// Train each net k in isolation to regress x_true from x_k (MSE on the
/// prior image), then freeze it and advance the samples by one EM update.
TrainResult sequential_train(const std::vector<TrainingSample>& train_set,
                             const std::vector<TrainingSample>& valid_set,
                             const TrainConfig& cfg);

/// Dispatch on cfg.method.  Truncation/end2end run per-sample AdamW steps
/// in a seeded shuffled order, one shuffle per epoch.  Deterministic given
/// cfg.seed at any thread count.
TrainResult train(const std::vector<TrainingSample>& train_set,
                  const std::vector<TrainingSample>& valid_set, const TrainConfig& cfg);

} // namespace parbeam::train
