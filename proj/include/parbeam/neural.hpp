#pragma once

/// Self-contained 3-layer 3D CNN used as an image prior, with exact
/// reverse-mode gradients and an AdamW optimizer.
///
/// Architecture: 3x3x3 cross-correlations with replicate padding and
/// per-output-channel bias, channel widths 1 -> 4 -> 4 -> 1, ReLU after the
/// first two layers, and a residual connection:
///
///   u = x + conv3(relu(conv2(relu(conv1(x)))))
///
/// 657 trainable parameters in total (112 + 436 + 109).  Everything here is
/// 64-bit; volumes cross over from the 32-bit physics types via cast_volume.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "parbeam/errors.hpp"
#include "parbeam/types.hpp"

namespace parbeam::nn {

enum class Activation { relu, identity };

/// All trainable parameters in one flat vector, in the fixed serialization
/// order w1, b1, w2, b2, w3, b3.  Kernel taps are stored i-fastest, then j,
/// then k, then input channel, then output channel.
struct NetworkWeights {
    static constexpr int kHidden = 4;
    static constexpr int kTaps = 27; // 3*3*3
    static constexpr int kOffW1 = 0, kOffB1 = 108;
    static constexpr int kOffW2 = 112, kOffB2 = 544;
    static constexpr int kOffW3 = 548, kOffB3 = 656;
    static constexpr int kParamCount = 657;

    std::vector<double> p = std::vector<double>(std::size_t(kParamCount), 0.0);

    double* w1() { return p.data() + kOffW1; }
    double* b1() { return p.data() + kOffB1; }
    double* w2() { return p.data() + kOffW2; }
    double* b2() { return p.data() + kOffB2; }
    double* w3() { return p.data() + kOffW3; }
    double* b3() { return p.data() + kOffB3; }
    const double* w1() const { return p.data() + kOffW1; }
    const double* b1() const { return p.data() + kOffB1; }
    const double* w2() const { return p.data() + kOffW2; }
    const double* b2() const { return p.data() + kOffB2; }
    const double* w3() const { return p.data() + kOffW3; }
    const double* b3() const { return p.data() + kOffB3; }
};

/// Human-readable location of a flat parameter index, e.g. "w2[17]".
std::string param_name(int flat_index);

/// Zero-mean Gaussian weights with per-layer scale sqrt(2 / fan_in), zero
/// biases; deterministic in the seed.
NetworkWeights gaussian_init(std::uint64_t seed);

/// Dense 3D cross-correlation, stride 1, replicate padding of one voxel, so
/// the output has the input's shape.  Channel-major buffers: channel c of a
/// field starts at c * s.total().  Bias added per output channel.
void conv3_forward(const double* in, int in_ch, double* out, int out_ch, const Shape3& s,
                   const double* w, const double* b);

/// Reverse-mode of conv3_forward: accumulates (+=) into grad_in (unless
/// null), grad_w, and grad_b for the upstream gradient grad_out.
void conv3_backward(const double* in, int in_ch, const double* grad_out, int out_ch,
                    const Shape3& s, const double* w, double* grad_in, double* grad_w,
                    double* grad_b);

/// Saved activations from one regularizer_forward call.
struct Tape {
    Shape3 shape{};
    Activation act = Activation::relu;
    std::vector<double> x;  // network input
    std::vector<double> a1; // conv1 output, pre-activation (kHidden channels)
    std::vector<double> r1; // activation of a1
    std::vector<double> a2; // conv2 output, pre-activation
    std::vector<double> r2; // activation of a2
    bool valid = false;
};

/// u = x + network(x); fills the tape for a later backward pass.  The
/// identity activation exists so tests can compare against a fully linear
/// Jacobian; normal use keeps the default ReLU.
void regularizer_forward(const Vol3<double>& x, const NetworkWeights& w, Vol3<double>& u,
                         Tape& tape, Activation act = Activation::relu);

/// Convenience wrapper when no gradient is needed.
Vol3<double> regularizer_apply(const Vol3<double>& x, const NetworkWeights& w,
                               Activation act = Activation::relu);

/// Given dL/du, accumulate dL/dx into grad_x (overwritten) and dL/dtheta
/// into grad_w (overwritten).  The ReLU derivative at exactly 0 is 0.
/// Throws UsageError on a tape that does not come from a matching forward.
void regularizer_backward(const Tape& tape, const NetworkWeights& w, const Vol3<double>& grad_u,
                          Vol3<double>& grad_x, NetworkWeights& grad_w);

struct AdamWConfig {
    double lr = 0.002;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.01;
};

/// First/second moment accumulators plus the step counter.
struct OptimState {
    std::vector<double> m = std::vector<double>(std::size_t(NetworkWeights::kParamCount), 0.0);
    std::vector<double> v = std::vector<double>(std::size_t(NetworkWeights::kParamCount), 0.0);
    long long step = 0;
};

/// Decoupled-weight-decay Adam step:
///   m <- b1 m + (1-b1) g;  v <- b2 v + (1-b2) g^2
///   w <- w - lr * (mhat / (sqrt(vhat) + eps) + weight_decay * w)
/// Throws TrainingError naming the parameter on a non-finite gradient.
void adamw_step(NetworkWeights& w, const NetworkWeights& g, OptimState& s, const AdamWConfig& cfg);

/// Weights on disk: <stem>.json manifest + <stem>.raw flat f64le blob in
/// the serialization order above.
void save_weights(const NetworkWeights& w, const std::filesystem::path& path);
NetworkWeights load_weights(const std::filesystem::path& path);

} // namespace parbeam::nn
