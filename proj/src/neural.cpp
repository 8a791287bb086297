#include "parbeam/neural.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

#include <json.hpp>

#include "parbeam/rng.hpp"

namespace parbeam::nn {

namespace {

constexpr int kH = NetworkWeights::kHidden;

inline int clampi(int v, int lo, int hi) { return v < lo ? lo : (v > hi ? hi : v); }

struct Segment {
    const char* name;
    int offset;
    int count;
};

constexpr Segment kSegments[] = {
    {"w1", NetworkWeights::kOffW1, 108}, {"b1", NetworkWeights::kOffB1, 4},
    {"w2", NetworkWeights::kOffW2, 432}, {"b2", NetworkWeights::kOffB2, 4},
    {"w3", NetworkWeights::kOffW3, 108}, {"b3", NetworkWeights::kOffB3, 1},
};

} // namespace

std::string param_name(int flat_index) {
    for (const auto& seg : kSegments)
        if (flat_index >= seg.offset && flat_index < seg.offset + seg.count)
            return std::string(seg.name) + "[" + std::to_string(flat_index - seg.offset) + "]";
    return "param[" + std::to_string(flat_index) + "]";
}

NetworkWeights gaussian_init(std::uint64_t seed) {
    NetworkWeights w;
    rng::Stream stream(seed, /*key=*/0x6e6e2d696e6974ull);
    const struct {
        int offset, count, fan_in;
    } layers[] = {
        {NetworkWeights::kOffW1, 108, 27},
        {NetworkWeights::kOffW2, 432, 27 * kH},
        {NetworkWeights::kOffW3, 108, 27 * kH},
    };
    for (const auto& l : layers) {
        const double sigma = std::sqrt(2.0 / double(l.fan_in));
        for (int t = 0; t < l.count; ++t) w.p[std::size_t(l.offset + t)] = sigma * stream.normal();
    }
    return w;
}

void conv3_forward(const double* in, int in_ch, double* out, int out_ch, const Shape3& s,
                   const double* w, const double* b) {
    if (in_ch < 1 || out_ch < 1) throw ShapeError("conv3_forward: channel counts must be >= 1");
    const int nx = s.nx, ny = s.ny, nz = s.nz;
    const std::size_t vox = s.total();
    for (int o = 0; o < out_ch; ++o) {
        double* oc = out + vox * std::size_t(o);
        const double bias = b[o];
        for (std::size_t t = 0; t < vox; ++t) oc[t] = bias;
        for (int ci = 0; ci < in_ch; ++ci) {
            const double* ic = in + vox * std::size_t(ci);
            const double* wt = w + 27 * std::size_t(ci + in_ch * o);
            for (int k = 0; k < nz; ++k) {
                for (int j = 0; j < ny; ++j) {
                    for (int i = 0; i < nx; ++i) {
                        double acc = 0.0;
                        int t = 0;
                        for (int dk = -1; dk <= 1; ++dk) {
                            const int kk = clampi(k + dk, 0, nz - 1);
                            for (int dj = -1; dj <= 1; ++dj) {
                                const int jj = clampi(j + dj, 0, ny - 1);
                                const std::size_t row =
                                    std::size_t(nx) * (std::size_t(jj) + std::size_t(ny) * std::size_t(kk));
                                for (int di = -1; di <= 1; ++di, ++t) {
                                    const int ii = clampi(i + di, 0, nx - 1);
                                    acc += ic[row + std::size_t(ii)] * wt[t];
                                }
                            }
                        }
                        oc[std::size_t(i) + std::size_t(nx) * (std::size_t(j) + std::size_t(ny) * std::size_t(k))] += acc;
                    }
                }
            }
        }
    }
}

void conv3_backward(const double* in, int in_ch, const double* grad_out, int out_ch,
                    const Shape3& s, const double* w, double* grad_in, double* grad_w,
                    double* grad_b) {
    const int nx = s.nx, ny = s.ny, nz = s.nz;
    const std::size_t vox = s.total();
    for (int o = 0; o < out_ch; ++o) {
        const double* go = grad_out + vox * std::size_t(o);
        double gb = 0.0;
        for (std::size_t t = 0; t < vox; ++t) gb += go[t];
        grad_b[o] += gb;
        for (int ci = 0; ci < in_ch; ++ci) {
            const double* ic = in + vox * std::size_t(ci);
            double* gi = grad_in ? grad_in + vox * std::size_t(ci) : nullptr;
            const double* wt = w + 27 * std::size_t(ci + in_ch * o);
            double* gw = grad_w + 27 * std::size_t(ci + in_ch * o);
            for (int k = 0; k < nz; ++k) {
                for (int j = 0; j < ny; ++j) {
                    for (int i = 0; i < nx; ++i) {
                        const double g =
                            go[std::size_t(i) + std::size_t(nx) * (std::size_t(j) + std::size_t(ny) * std::size_t(k))];
                        if (g == 0.0) continue;
                        int t = 0;
                        for (int dk = -1; dk <= 1; ++dk) {
                            const int kk = clampi(k + dk, 0, nz - 1);
                            for (int dj = -1; dj <= 1; ++dj) {
                                const int jj = clampi(j + dj, 0, ny - 1);
                                const std::size_t row =
                                    std::size_t(nx) * (std::size_t(jj) + std::size_t(ny) * std::size_t(kk));
                                for (int di = -1; di <= 1; ++di, ++t) {
                                    const int ii = clampi(i + di, 0, nx - 1);
                                    gw[t] += g * ic[row + std::size_t(ii)];
                                    if (gi) gi[row + std::size_t(ii)] += g * wt[t];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

namespace {

void activate(const std::vector<double>& a, std::vector<double>& r, Activation act) {
    r.resize(a.size());
    if (act == Activation::identity) {
        r = a;
        return;
    }
    for (std::size_t t = 0; t < a.size(); ++t) r[t] = a[t] > 0.0 ? a[t] : 0.0;
}

/// grad through the activation: g *= act'(a)
void activate_backward(const std::vector<double>& a, std::vector<double>& g, Activation act) {
    if (act == Activation::identity) return;
    for (std::size_t t = 0; t < g.size(); ++t)
        if (!(a[t] > 0.0)) g[t] = 0.0; // derivative 0 at exactly 0
}

} // namespace

void regularizer_forward(const Vol3<double>& x, const NetworkWeights& w, Vol3<double>& u,
                         Tape& tape, Activation act) {
    validate_volume(x, "regularizer_forward");
    validate_finite(x, "regularizer_forward");
    const Shape3 s = x.shape;
    const std::size_t vox = s.total();
    tape.shape = s;
    tape.act = act;
    tape.x = x.data;
    tape.a1.assign(vox * std::size_t(kH), 0.0);
    conv3_forward(tape.x.data(), 1, tape.a1.data(), kH, s, w.w1(), w.b1());
    activate(tape.a1, tape.r1, act);
    tape.a2.assign(vox * std::size_t(kH), 0.0);
    conv3_forward(tape.r1.data(), kH, tape.a2.data(), kH, s, w.w2(), w.b2());
    activate(tape.a2, tape.r2, act);
    u.shape = s;
    u.voxel_size_mm = x.voxel_size_mm;
    u.data.assign(vox, 0.0);
    conv3_forward(tape.r2.data(), kH, u.data.data(), 1, s, w.w3(), w.b3());
    for (std::size_t t = 0; t < vox; ++t) u.data[t] += tape.x[t]; // residual connection
    tape.valid = true;
}

Vol3<double> regularizer_apply(const Vol3<double>& x, const NetworkWeights& w, Activation act) {
    Tape tape;
    Vol3<double> u;
    regularizer_forward(x, w, u, tape, act);
    return u;
}

void regularizer_backward(const Tape& tape, const NetworkWeights& w, const Vol3<double>& grad_u,
                          Vol3<double>& grad_x, NetworkWeights& grad_w) {
    if (!tape.valid) throw UsageError("regularizer_backward: tape not produced by a forward pass");
    const Shape3 s = tape.shape;
    const std::size_t vox = s.total();
    if (!(grad_u.shape == s) || grad_u.data.size() != vox)
        throw ShapeError("regularizer_backward: upstream gradient shape does not match tape");
    if (tape.x.size() != vox || tape.a1.size() != vox * std::size_t(kH) ||
        tape.r1.size() != vox * std::size_t(kH) || tape.a2.size() != vox * std::size_t(kH) ||
        tape.r2.size() != vox * std::size_t(kH))
        throw UsageError("regularizer_backward: tape buffers are inconsistent");

    std::fill(grad_w.p.begin(), grad_w.p.end(), 0.0);
    grad_x.shape = s;
    grad_x.voxel_size_mm = grad_u.voxel_size_mm;
    grad_x.data = grad_u.data; // residual path passes grad_u straight through

    std::vector<double> g2(vox * std::size_t(kH), 0.0); // d/d r2
    conv3_backward(tape.r2.data(), kH, grad_u.data.data(), 1, s, w.w3(), g2.data(), grad_w.w3(),
                   grad_w.b3());
    activate_backward(tape.a2, g2, tape.act); // now d/d a2

    std::vector<double> g1(vox * std::size_t(kH), 0.0); // d/d r1
    conv3_backward(tape.r1.data(), kH, g2.data(), kH, s, w.w2(), g1.data(), grad_w.w2(),
                   grad_w.b2());
    activate_backward(tape.a1, g1, tape.act); // now d/d a1

    conv3_backward(tape.x.data(), 1, g1.data(), kH, s, w.w1(), grad_x.data.data(), grad_w.w1(),
                   grad_w.b1());
}

void adamw_step(NetworkWeights& w, const NetworkWeights& g, OptimState& s, const AdamWConfig& cfg) {
    const int n = NetworkWeights::kParamCount;
    for (int t = 0; t < n; ++t)
        if (!std::isfinite(g.p[std::size_t(t)]))
            throw TrainingError("adamw_step: non-finite gradient at " + param_name(t));
    s.step += 1;
    const double bc1 = 1.0 - std::pow(cfg.beta1, double(s.step));
    const double bc2 = 1.0 - std::pow(cfg.beta2, double(s.step));
    for (int t = 0; t < n; ++t) {
        const double grad = g.p[std::size_t(t)];
        double& m = s.m[std::size_t(t)];
        double& v = s.v[std::size_t(t)];
        m = cfg.beta1 * m + (1.0 - cfg.beta1) * grad;
        v = cfg.beta2 * v + (1.0 - cfg.beta2) * grad * grad;
        const double mhat = m / bc1;
        const double vhat = v / bc2;
        double& p = w.p[std::size_t(t)];
        p -= cfg.lr * (mhat / (std::sqrt(vhat) + cfg.eps) + cfg.weight_decay * p);
    }
}

void save_weights(const NetworkWeights& w, const std::filesystem::path& path) {
    auto stem = path;
    auto ext = stem.extension();
    if (ext == ".json" || ext == ".raw") stem.replace_extension();
    nlohmann::json j;
    j["dtype"] = "f64le";
    j["param_count"] = NetworkWeights::kParamCount;
    j["order"] = "w1,b1,w2,b2,w3,b3";
    j["layers"] = {
        {{"name", "conv1"}, {"kernel", {3, 3, 3}}, {"in", 1}, {"out", kH}},
        {{"name", "conv2"}, {"kernel", {3, 3, 3}}, {"in", kH}, {"out", kH}},
        {{"name", "conv3"}, {"kernel", {3, 3, 3}}, {"in", kH}, {"out", 1}},
    };
    j["tap_order"] = "i-fastest, then j, k, input channel, output channel";
    {
        std::ofstream f(stem.string() + ".json", std::ios::binary | std::ios::trunc);
        if (!f) throw IoError("cannot open " + stem.string() + ".json for writing");
        f << j.dump(2) << "\n";
        if (!f) throw IoError("write failed: " + stem.string() + ".json");
    }
    std::ofstream f(stem.string() + ".raw", std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot open " + stem.string() + ".raw for writing");
    f.write(reinterpret_cast<const char*>(w.p.data()), std::streamsize(w.p.size() * sizeof(double)));
    if (!f) throw IoError("write failed: " + stem.string() + ".raw");
}

NetworkWeights load_weights(const std::filesystem::path& path) {
    auto stem = path;
    auto ext = stem.extension();
    if (ext == ".json" || ext == ".raw") stem.replace_extension();
    std::ifstream hf(stem.string() + ".json");
    if (!hf) throw IoError("cannot open weights manifest " + stem.string() + ".json");
    nlohmann::json j;
    try {
        hf >> j;
    } catch (const nlohmann::json::parse_error& e) {
        throw FormatError("corrupt weights manifest " + stem.string() + ".json: " + e.what());
    }
    if (!j.contains("dtype") || j["dtype"] != "f64le")
        throw FormatError("weights manifest " + stem.string() + ".json: field \"dtype\" must be \"f64le\"");
    if (!j.contains("param_count") || j["param_count"].get<int>() != NetworkWeights::kParamCount)
        throw FormatError("weights manifest " + stem.string() + ".json: field \"param_count\" must be " +
                          std::to_string(NetworkWeights::kParamCount));
    std::ifstream f(stem.string() + ".raw", std::ios::binary);
    if (!f) throw IoError("cannot open weights payload " + stem.string() + ".raw");
    f.seekg(0, std::ios::end);
    const std::size_t bytes = std::size_t(f.tellg());
    f.seekg(0);
    NetworkWeights w;
    if (bytes != w.p.size() * sizeof(double))
        throw SizeMismatchError("weights payload " + stem.string() + ".raw has " +
                                std::to_string(bytes) + " bytes, expected " +
                                std::to_string(w.p.size() * sizeof(double)));
    f.read(reinterpret_cast<char*>(w.p.data()), std::streamsize(bytes));
    if (!f) throw IoError("read failed: " + stem.string() + ".raw");
    for (double v : w.p)
        if (!std::isfinite(v)) throw FormatError("weights payload contains non-finite values");
    return w;
}

} // namespace parbeam::nn
