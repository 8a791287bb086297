/// Command line front end: phantom generation, measurement simulation,
/// projection, reconstruction, unrolled training, and self-checks.
///
/// Exit codes: 0 success, 1 validation / runtime failure, 2 usage error.
/// Every run writes "<out>_run.json" (or "run.json" when the command has no
/// output stem) with the fully resolved configuration.  A JSON file passed
/// via --config supplies defaults; explicit flags override it.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "parbeam/io.hpp"
#include "parbeam/neural.hpp"
#include "parbeam/projector.hpp"
#include "parbeam/psf.hpp"
#include "parbeam/recon.hpp"
#include "parbeam/rng.hpp"
#include "parbeam/rotation.hpp"
#include "parbeam/simulate.hpp"
#include "parbeam/training.hpp"
#include "parbeam/types.hpp"

namespace {

using nlohmann::json;
using namespace parbeam;

/// Raised for problems that are the caller's fault but only detectable after
/// flag parsing (malformed list values, contradictory flags).  Mapped to
/// exit code 2 like any other usage error.
struct CliUsage : std::runtime_error {
    explicit CliUsage(const std::string& msg) : std::runtime_error(msg) {}
};

// ---- config file ------------------------------------------------------------

json g_file_cfg = json::object();

/// Load the JSON config named by a --config/--config=... argument, if any.
void load_file_config(int argc, char** argv) {
    std::string path;
    for (int i = 1; i < argc; ++i) {
        std::string a = argv[i];
        if (a == "--config" && i + 1 < argc) path = argv[i + 1];
        else if (a.rfind("--config=", 0) == 0) path = a.substr(9);
    }
    if (path.empty()) return;
    std::ifstream in(path);
    if (!in) throw IoError("config: cannot open \"" + path + "\"");
    try {
        in >> g_file_cfg;
    } catch (const json::exception& e) {
        throw FormatError("config: " + std::string(e.what()));
    }
    if (!g_file_cfg.is_object()) throw FormatError("config: top level must be a JSON object");
}

/// Default for a flag: config file value if present, else the hard default.
template <typename T>
T cfg(const std::string& key, T hard) {
    if (!g_file_cfg.contains(key)) return hard;
    try {
        return g_file_cfg.at(key).get<T>();
    } catch (const json::exception&) {
        throw FormatError("config: bad value for \"" + key + "\"");
    }
}

bool cfg_has(const std::string& key) { return g_file_cfg.contains(key); }

/// Required flag unless the config file already supplies it.
void require_unless_config(CLI::Option* opt, const std::string& key) {
    if (!cfg_has(key)) opt->required();
}

// ---- small parsers ----------------------------------------------------------

std::vector<double> parse_list(const std::string& text, const char* what) {
    std::vector<double> out;
    std::stringstream ss(text);
    std::string tok;
    while (std::getline(ss, tok, ',')) {
        try {
            std::size_t used = 0;
            out.push_back(std::stod(tok, &used));
            if (used != tok.size()) throw std::invalid_argument(tok);
        } catch (const std::exception&) {
            throw CliUsage(std::string(what) + ": cannot parse \"" + text + "\"");
        }
    }
    if (out.empty()) throw CliUsage(std::string(what) + ": empty list");
    return out;
}

Shape3 parse_shape(const std::string& text) {
    auto v = parse_list(text, "--shape");
    if (v.size() != 3) throw CliUsage("--shape: expected nx,ny,nz");
    Shape3 s{int(v[0]), int(v[1]), int(v[2])};
    for (int d : {s.nx, s.ny, s.nz})
        if (d < 1) throw CliUsage("--shape: dimensions must be positive");
    return s;
}

std::array<double, 3> parse_voxel(const std::string& text) {
    auto v = parse_list(text, "--voxel-size");
    if (v.size() == 1) return {v[0], v[0], v[0]};
    if (v.size() != 3) throw CliUsage("--voxel-size: expected one value or vx,vy,vz");
    return {v[0], v[1], v[2]};
}

std::vector<int> parse_int_list(const std::string& text, const char* what) {
    std::vector<int> out;
    for (double d : parse_list(text, what)) {
        if (d != std::floor(d) || d < 0) throw CliUsage(std::string(what) + ": expected integers");
        out.push_back(int(d));
    }
    return out;
}

std::vector<double> uniform_angles(int nview) {
    if (nview < 1) throw CliUsage("--views: must be positive");
    std::vector<double> a(static_cast<std::size_t>(nview));
    for (int l = 0; l < nview; ++l) a[std::size_t(l)] = 2.0 * M_PI * l / nview;
    return a;
}

rot::Method rot_from_name(const std::string& name) {
    if (name == "bilinear") return rot::Method::bilinear;
    if (name == "three-pass") return rot::Method::three_pass_1d;
    throw CliUsage("--rot: expected bilinear or three-pass");
}

// ---- system assembly ----------------------------------------------------------

/// Flags shared by every command that builds a system operator.
struct ModelOpts {
    std::string mu_stem;
    std::string psf_stem;
    std::string fwhm;          // "f0" or "f0,fN" in mm, linear ramp over depth
    std::string psf_size = "5,5";
    std::string rot = "bilinear";
    int threads = 1;
};

void add_model_opts(CLI::App* c, ModelOpts& m) {
    c->add_option("--mu", m.mu_stem, "attenuation volume stem (mm^-1); zero if omitted");
    c->add_option("--psf", m.psf_stem, "depth-dependent PSF stack stem");
    c->add_option("--fwhm", m.fwhm,
                  "generate a Gaussian PSF: FWHM in mm at the nearest and farthest "
                  "depth plane, e.g. 4 or 4,9");
    c->add_option("--psf-size", m.psf_size, "generated PSF taps px,pz (odd)")
        ->default_val(cfg<std::string>("psf-size", "5,5"));
    c->add_option("--rot", m.rot, "plane rotation: bilinear or three-pass")
        ->default_val(cfg<std::string>("rot", "bilinear"));
    c->add_option("--threads", m.threads, "worker threads (0 = hardware)")
        ->default_val(cfg<int>("threads", 1));
}

json model_opts_json(const ModelOpts& m) {
    return json{{"mu", m.mu_stem},   {"psf", m.psf_stem},       {"fwhm", m.fwhm},
                {"psf-size", m.psf_size}, {"rot", m.rot},       {"threads", m.threads}};
}

PsfStack<float> build_psf(const ModelOpts& m, int ny, int nview, double voxel_y_mm) {
    if (!m.psf_stem.empty()) return io::read_psf(m.psf_stem);
    if (!m.fwhm.empty()) {
        auto f = parse_list(m.fwhm, "--fwhm");
        if (f.size() > 2) throw CliUsage("--fwhm: expected one or two values");
        double f0 = f[0], f1 = f.size() == 2 ? f[1] : f[0];
        std::vector<double> ramp(static_cast<std::size_t>(ny));
        for (int j = 0; j < ny; ++j)
            ramp[std::size_t(j)] = ny > 1 ? f0 + (f1 - f0) * j / (ny - 1) : f0;
        auto px_pz = parse_int_list(m.psf_size, "--psf-size");
        if (px_pz.size() != 2) throw CliUsage("--psf-size: expected px,pz");
        return psf::gaussian_psf(ramp, px_pz[0], px_pz[1], voxel_y_mm, nview);
    }
    return psf::delta_psf(1, 1, ny, nview);
}

/// Assemble the operator from flags.  The attenuation volume, when given,
/// fixes the geometry; otherwise shape/voxel come from the caller.
template <typename T>
std::shared_ptr<proj::SystemModel<T>> build_model(const ModelOpts& m, Shape3 shape,
                                                  std::array<double, 3> voxel,
                                                  std::vector<double> angles) {
    Vol3<T> mu(shape, voxel);
    if (!m.mu_stem.empty()) {
        Volume mu_f = io::read_volume(m.mu_stem);
        if (!(mu_f.shape == shape))
            throw ShapeError("--mu: attenuation shape does not match the working geometry");
        mu = cast_volume<T>(mu_f);
    }
    PsfStack<float> psf_f = build_psf(m, shape.ny, int(angles.size()), voxel[1]);
    return std::make_shared<proj::SystemModel<T>>(mu, cast_psf<T>(psf_f), std::move(angles),
                                                  rot_from_name(m.rot), m.threads);
}

/// Geometry for commands whose input is a volume on disk.
struct Geometry {
    Shape3 shape;
    std::array<double, 3> voxel;
};

Geometry geometry_from(const ModelOpts& m, const std::string& shape_flag,
                       const std::string& voxel_flag) {
    if (!m.mu_stem.empty()) {
        Volume mu = io::read_volume(m.mu_stem);
        Geometry g{mu.shape, mu.voxel_size_mm};
        if (!shape_flag.empty() && !(parse_shape(shape_flag) == g.shape))
            throw CliUsage("--shape contradicts the attenuation volume");
        return g;
    }
    if (shape_flag.empty()) throw CliUsage("provide --shape or --mu to fix the geometry");
    return Geometry{parse_shape(shape_flag), parse_voxel(voxel_flag)};
}

// ---- run.json ----------------------------------------------------------------

void write_run_json(const std::string& command, const std::string& out_stem, json config) {
    json run{{"command", command}, {"config", std::move(config)}};
    std::string path = out_stem.empty() ? "run.json" : out_stem + "_run.json";
    std::ofstream out(path);
    if (!out) throw IoError("cannot write \"" + path + "\"");
    out << run.dump(2) << "\n";
}

std::uint64_t fnv1a64(const void* data, std::size_t n, std::uint64_t h = 0xcbf29ce484222325ull) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

// ---- phantom -----------------------------------------------------------------

struct PhantomCmd {
    std::string in, out;
    std::uint64_t seed = 0;
};

int run_phantom(const PhantomCmd& a) {
    sim::PhantomSpec spec = sim::read_phantom_spec(a.in);
    sim::Phantom ph = sim::make_phantom(spec, a.seed);
    for (const std::string& w : ph.masks.warnings) std::cerr << "warning: " << w << "\n";
    io::write_volume(ph.activity, a.out + "_activity");
    io::write_volume(ph.attenuation, a.out + "_mu");
    io::LabelMap lm;
    lm.shape = ph.masks.shape;
    lm.labels = ph.masks.labels;
    for (const auto& [name, id] : ph.masks.legend) lm.legend[name] = std::uint8_t(id);
    io::write_labels(lm, a.out + "_labels");
    std::cout << "phantom: " << spec.shape.nx << "x" << spec.shape.ny << "x" << spec.shape.nz
              << ", " << spec.ellipsoids.size() << " regions, " << ph.masks.legend.size()
              << " labels -> " << a.out << "_{activity,mu,labels}\n";
    write_run_json("phantom", a.out, json{{"in", a.in}, {"out", a.out}, {"seed", a.seed}});
    return 0;
}

// ---- project / backproject -----------------------------------------------------

struct ProjectCmd {
    std::string in, out;
    int views = 0;
    ModelOpts model;
};

int run_project(const ProjectCmd& a) {
    Volume x = io::read_volume(a.in);
    auto model = build_model<float>(a.model, x.shape, x.voxel_size_mm, uniform_angles(a.views));
    ProjectionViews v = proj::forward_project(x, *model);
    io::write_views(v, a.out);
    std::cout << "project: " << a.views << " views of " << x.shape.nx << "x" << x.shape.ny << "x"
              << x.shape.nz << " -> " << a.out << "\n";
    json c = model_opts_json(a.model);
    c["in"] = a.in;
    c["out"] = a.out;
    c["views"] = a.views;
    write_run_json("project", a.out, c);
    return 0;
}

struct BackprojectCmd {
    std::string in, out, shape, voxel = "4";
    ModelOpts model;
};

int run_backproject(const BackprojectCmd& a) {
    ProjectionViews v = io::read_views(a.in);
    Geometry g = geometry_from(a.model, a.shape, a.voxel);
    auto model = build_model<float>(a.model, g.shape, g.voxel, v.angles_rad);
    Volume x = proj::back_project(v, *model);
    io::write_volume(x, a.out);
    std::cout << "backproject: " << v.nview << " views -> " << g.shape.nx << "x" << g.shape.ny
              << "x" << g.shape.nz << " -> " << a.out << "\n";
    json c = model_opts_json(a.model);
    c["in"] = a.in;
    c["out"] = a.out;
    c["shape"] = a.shape;
    c["voxel-size"] = a.voxel;
    write_run_json("backproject", a.out, c);
    return 0;
}

// ---- simulate ------------------------------------------------------------------

struct SimulateCmd {
    std::string in, out;
    int views = 0;
    double total_counts = 0.0;
    double scatter_fraction = 0.1;
    std::uint64_t seed = 0;
    ModelOpts model;
};

int run_simulate(const SimulateCmd& a) {
    Volume x = io::read_volume(a.in);
    auto model = build_model<float>(a.model, x.shape, x.voxel_size_mm, uniform_angles(a.views));
    auto [y, r_bar] = sim::simulate_measurements(x, *model, a.scatter_fraction, a.total_counts,
                                                 a.seed);
    io::write_views(y, a.out + "_y");
    io::write_views(r_bar, a.out + "_rbar");
    double drawn = 0.0;
    for (float c : y.data) drawn += c;
    std::cout << "simulate: " << a.views << " views, expected " << a.total_counts
              << " counts, drew " << std::uint64_t(drawn) << " -> " << a.out << "_{y,rbar}\n";
    json c = model_opts_json(a.model);
    c["in"] = a.in;
    c["out"] = a.out;
    c["views"] = a.views;
    c["total-counts"] = a.total_counts;
    c["scatter-fraction"] = a.scatter_fraction;
    c["seed"] = a.seed;
    write_run_json("simulate", a.out, c);
    return 0;
}

// ---- recon ---------------------------------------------------------------------

struct ReconCmd {
    std::string in, rbar, out, algo = "mlem", shape, voxel = "4", nets;
    int iters = 16, subsets = 4, outer = 3, inner = 1;
    double beta = 1.0;
    ModelOpts model;
};

int run_recon(const ReconCmd& a) {
    ProjectionViews y = io::read_views(a.in);
    ProjectionViews r_bar = io::read_views(a.rbar);
    Geometry g = geometry_from(a.model, a.shape, a.voxel);
    Volume x_hat;
    if (a.algo == "mlem" || a.algo == "osem") {
        auto model = build_model<float>(a.model, g.shape, g.voxel, y.angles_rad);
        recon::PoissonProblem<float> prob{y, r_bar, *model};
        Volume x0(g.shape, g.voxel);
        std::fill(x0.data.begin(), x0.data.end(), 1.0f);
        x_hat = a.algo == "mlem" ? recon::mlem(prob, x0, a.iters)
                                 : recon::osem(prob, x0, a.iters, a.subsets);
    } else if (a.algo == "cnn-em") {
        if (a.nets.empty()) throw CliUsage("recon --algo cnn-em needs --nets");
        auto model = build_model<double>(a.model, g.shape, g.voxel, y.angles_rad);
        Views3<double> yd = cast_views<double>(y);
        Views3<double> rd = cast_views<double>(r_bar);
        recon::PoissonProblem<double> prob{yd, rd, *model};
        std::vector<nn::NetworkWeights> nets;
        for (int k = 0; k < a.outer; ++k)
            nets.push_back(nn::load_weights(a.nets + "_net" + std::to_string(k)));
        Vol3<double> x0 = train::osem_warm_start(prob, a.iters, a.subsets);
        train::TrainConfig cfg;
        cfg.outer = a.outer;
        cfg.inner = a.inner;
        cfg.beta = a.beta;
        train::UnrolledTape tape;
        x_hat = cast_volume<float>(train::unrolled_forward(prob, x0, nets, cfg, tape));
    } else {
        throw CliUsage("--algo: expected mlem, osem, or cnn-em");
    }
    io::write_volume(x_hat, a.out);
    std::cout << "recon: " << a.algo << " -> " << a.out << "\n";
    json c = model_opts_json(a.model);
    c["in"] = a.in;
    c["rbar"] = a.rbar;
    c["out"] = a.out;
    c["algo"] = a.algo;
    c["iters"] = a.iters;
    c["subsets"] = a.subsets;
    c["shape"] = a.shape;
    c["voxel-size"] = a.voxel;
    c["beta"] = a.beta;
    c["outer"] = a.outer;
    c["inner"] = a.inner;
    c["nets"] = a.nets;
    write_run_json("recon", a.out, c);
    return 0;
}

// ---- train ---------------------------------------------------------------------

struct TrainCmd {
    std::string in, out, method = "e2e";
    int epochs = 0, outer = 3, inner = 1, warm_iters = 16, warm_subsets = 4;
    int checkpoint_every = 0;
    double beta = 1.0, lr = 0.002, weight_decay = nn::AdamWConfig{}.weight_decay;
    std::uint64_t seed = 0;
    ModelOpts model;
};

/// One manifest entry -> a training sample; geometry comes from the files.
train::TrainingSample load_sample(const json& e, const TrainCmd& a) {
    for (const char* key : {"y", "r_bar", "x_true"})
        if (!e.contains(key))
            throw FormatError(std::string("train manifest: sample missing \"") + key + "\"");
    Views3<double> y = cast_views<double>(io::read_views(e.at("y").get<std::string>()));
    Views3<double> r_bar = cast_views<double>(io::read_views(e.at("r_bar").get<std::string>()));
    Volume x_true_f = io::read_volume(e.at("x_true").get<std::string>());
    ModelOpts m = a.model;
    if (e.contains("mu")) m.mu_stem = e.at("mu").get<std::string>();
    if (e.contains("psf")) m.psf_stem = e.at("psf").get<std::string>();
    auto model = build_model<double>(m, x_true_f.shape, x_true_f.voxel_size_mm, y.angles_rad);
    train::TrainingSample s;
    s.model = model;
    s.y = std::move(y);
    s.r_bar = std::move(r_bar);
    s.x_true = cast_volume<double>(x_true_f);
    if (e.contains("x0")) {
        s.x0 = cast_volume<double>(io::read_volume(e.at("x0").get<std::string>()));
    } else {
        recon::PoissonProblem<double> prob{s.y, s.r_bar, *model};
        s.x0 = train::osem_warm_start(prob, a.warm_iters, a.warm_subsets);
    }
    return s;
}

int run_train(const TrainCmd& a) {
    std::ifstream in(a.in);
    if (!in) throw IoError("train: cannot open manifest \"" + a.in + "\"");
    json manifest;
    try {
        in >> manifest;
    } catch (const json::exception& e) {
        throw FormatError("train manifest: " + std::string(e.what()));
    }
    if (!manifest.is_object() || !manifest.contains("train") || !manifest["train"].is_array())
        throw FormatError("train manifest: expected {\"train\": [...], \"valid\": [...]}");
    std::vector<train::TrainingSample> train_set, valid_set;
    for (const json& e : manifest["train"]) train_set.push_back(load_sample(e, a));
    if (manifest.contains("valid"))
        for (const json& e : manifest["valid"]) valid_set.push_back(load_sample(e, a));

    train::TrainConfig cfg;
    cfg.outer = a.outer;
    cfg.inner = a.inner;
    cfg.beta = a.beta;
    cfg.epochs = a.epochs;
    cfg.adamw.lr = a.lr;
    cfg.adamw.weight_decay = a.weight_decay;
    cfg.method = train::method_from_name(a.method);
    cfg.seed = a.seed;
    cfg.checkpoint_every = a.checkpoint_every;
    cfg.checkpoint_stem = a.out + "_ckpt";
    train::TrainResult res = cfg.method == train::Method::sequential
                                 ? train::sequential_train(train_set, valid_set, cfg)
                                 : train::train(train_set, valid_set, cfg);

    for (std::size_t k = 0; k < res.nets.size(); ++k)
        nn::save_weights(res.nets[k], a.out + "_net" + std::to_string(k));
    std::string curve_path = a.out + "_curve.csv";
    std::ofstream curve(curve_path);
    if (!curve) throw IoError("cannot write \"" + curve_path + "\"");
    curve << "epoch,train_mse,valid_mse\n";
    curve.precision(17);
    for (std::size_t i = 0; i < res.curve.train_mse.size(); ++i)
        curve << i << "," << res.curve.train_mse[i] << "," << res.curve.valid_mse[i] << "\n";
    std::cout << "train: method=" << a.method << " epochs=" << a.epochs << " samples="
              << train_set.size() << "/" << valid_set.size() << " -> " << a.out << "_net0.."
              << a.out << "_net" << (res.nets.size() - 1) << "\n";
    if (!res.curve.train_mse.empty())
        std::cout << "train: first/last train mse " << res.curve.train_mse.front() << " / "
                  << res.curve.train_mse.back() << "\n";
    json c = model_opts_json(a.model);
    c["in"] = a.in;
    c["out"] = a.out;
    c["method"] = a.method;
    c["epochs"] = a.epochs;
    c["outer"] = a.outer;
    c["inner"] = a.inner;
    c["beta"] = a.beta;
    c["lr"] = a.lr;
    c["weight-decay"] = a.weight_decay;
    c["seed"] = a.seed;
    c["warm-iters"] = a.warm_iters;
    c["warm-subsets"] = a.warm_subsets;
    c["checkpoint-every"] = a.checkpoint_every;
    write_run_json("train", a.out, c);
    return 0;
}

// ---- eval ----------------------------------------------------------------------

struct EvalCmd {
    std::string in, truth, labels, out;
};

int run_eval(const EvalCmd& a) {
    Volume x_hat = io::read_volume(a.in);
    Volume x_true = io::read_volume(a.truth);
    io::LabelMap lm = io::read_labels(a.labels);
    sim::VoiMask mask;
    mask.shape = lm.shape;
    mask.labels = lm.labels;
    for (const auto& [name, id] : lm.legend) mask.legend[name] = int(id);

    std::ostringstream csv;
    csv.precision(17);
    csv << "label,voxels,mae_percent,nrmse_percent\n";
    for (const auto& [name, id] : mask.legend) {
        (void)id;
        csv << name << "," << mask.cardinality(name) << ",";
        try {
            csv << sim::mae(x_hat, x_true, mask, name) << ","
                << sim::nrmse(x_hat, x_true, mask, name) << "\n";
        } catch (const DomainError&) {
            csv << "nan,nan\n";
        }
    }
    std::ofstream out(a.out);
    if (!out) throw IoError("cannot write \"" + a.out + "\"");
    out << csv.str();
    std::cout << csv.str();
    write_run_json("eval", a.out,
                   json{{"in", a.in}, {"truth", a.truth}, {"labels", a.labels}, {"out", a.out}});
    return 0;
}

// ---- adjoint-check --------------------------------------------------------------

struct AdjointCmd {
    int trials = 100, views = 7, threads = 1;
    std::string shape = "8,8,6";
    std::uint64_t seed = 0;
};

/// Random attenuation, PSF, and jittered angles for one self-check trial.
std::shared_ptr<proj::SystemModel<double>> random_system(Shape3 s, int nview, std::uint64_t seed,
                                                         int threads) {
    rng::Stream st(seed, 0x61646a636bull);
    Vol3<double> mu(s, {4.0, 4.0, 4.0});
    for (double& v : mu.data) v = 0.02 * st.uniform();
    const int sizes[3] = {1, 3, 5};
    int px = sizes[st.below(3)], pz = sizes[st.below(3)];
    PsfStack<double> psf(px, pz, s.ny, nview);
    for (int l = 0; l < nview; ++l)
        for (int j = 0; j < s.ny; ++j) {
            double sum = 0.0;
            for (int b = 0; b <= pz / 2; ++b)
                for (int a = 0; a <= px / 2; ++a) {
                    double v = 0.05 + st.uniform();
                    psf.tap(px / 2 + a, pz / 2 + b, j, l) = v;
                    psf.tap(px / 2 - a, pz / 2 + b, j, l) = v;
                    psf.tap(px / 2 + a, pz / 2 - b, j, l) = v;
                    psf.tap(px / 2 - a, pz / 2 - b, j, l) = v;
                }
            for (int t = 0; t < px * pz; ++t) sum += psf.kernel(j, l)[t];
            for (int t = 0; t < px * pz; ++t) psf.kernel(j, l)[t] /= sum;
        }
    std::vector<double> angles(static_cast<std::size_t>(nview));
    for (int l = 0; l < nview; ++l)
        angles[std::size_t(l)] = 2.0 * M_PI * (l + 0.5 * st.uniform()) / nview;
    rot::Method method = st.below(2) == 0 ? rot::Method::bilinear : rot::Method::three_pass_1d;
    return std::make_shared<proj::SystemModel<double>>(std::move(mu), std::move(psf),
                                                       std::move(angles), method, threads);
}

int run_adjoint_check(const AdjointCmd& a) {
    Shape3 s = parse_shape(a.shape);
    double worst_abs = 0.0, worst_rel = 0.0;
    for (int t = 0; t < a.trials; ++t) {
        auto model = random_system(s, a.views, a.seed + std::uint64_t(t), a.threads);
        proj::DenseMatrix<double> A = proj::to_explicit_matrix(*model);
        proj::DenseMatrix<double> At = proj::adjoint_to_explicit_matrix(*model);
        double diff2 = 0.0, norm2 = 0.0;
        for (int r = 0; r < A.rows; ++r)
            for (int c = 0; c < A.cols; ++c) {
                double d = At.at(c, r) - A.at(r, c);
                diff2 += d * d;
                norm2 += A.at(r, c) * A.at(r, c);
            }
        double abs_d = std::sqrt(diff2), rel = abs_d / std::max(std::sqrt(norm2), 1e-300);
        worst_abs = std::max(worst_abs, abs_d);
        worst_rel = std::max(worst_rel, rel);
    }
    bool pass = worst_rel <= 1e-6;
    std::cout.precision(6);
    std::cout << std::scientific << "adjoint-check: trials=" << a.trials << " shape=" << a.shape
              << " views=" << a.views << " max ||A' - A^T||_F = " << worst_abs
              << " (relative " << worst_rel << ")  " << (pass ? "PASS" : "FAIL") << "\n";
    write_run_json("adjoint-check", "",
                   json{{"trials", a.trials},
                        {"shape", a.shape},
                        {"views", a.views},
                        {"seed", a.seed},
                        {"threads", a.threads}});
    return pass ? 0 : 1;
}

// ---- bench ---------------------------------------------------------------------

struct BenchCmd {
    std::string shape = "64,64,40", threads = "1,2,4,8";
    int views = 128, reps = 2;
    std::uint64_t seed = 0;
};

/// Smooth deterministic blob phantom for timing runs.
Volume bench_phantom(Shape3 s, std::uint64_t seed) {
    rng::Stream st(seed, 0x62656e6368ull);
    Volume x(s, {4.0, 4.0, 4.0});
    for (int blob = 0; blob < 5; ++blob) {
        double ci = s.nx * (0.25 + 0.5 * st.uniform());
        double cj = s.ny * (0.25 + 0.5 * st.uniform());
        double ck = s.nz * (0.25 + 0.5 * st.uniform());
        double w = 2.0 + 4.0 * st.uniform(), amp = 1.0 + st.uniform();
        for (int k = 0; k < s.nz; ++k)
            for (int j = 0; j < s.ny; ++j)
                for (int i = 0; i < s.nx; ++i) {
                    double r2 = (i - ci) * (i - ci) + (j - cj) * (j - cj) + (k - ck) * (k - ck);
                    x.at(i, j, k) += float(amp * std::exp(-r2 / (2.0 * w * w)));
                }
    }
    return x;
}

int run_bench(const BenchCmd& a) {
    Shape3 s = parse_shape(a.shape);
    std::vector<int> thread_counts = parse_int_list(a.threads, "--threads");
    if (a.reps < 1) throw CliUsage("--reps: must be positive");
    Volume x = bench_phantom(s, a.seed);
    Volume mu(s, x.voxel_size_mm);
    for (std::size_t i = 0; i < mu.data.size(); ++i)
        mu.data[i] = 0.01f + 0.005f * x.data[i] / 3.0f;
    io::write_volume(mu, "/tmp/parbeam_bench_mu"); // reread per model so inputs are identical
    std::vector<std::uint64_t> checksums;
    for (int nt : thread_counts) {
        ModelOpts m;
        m.mu_stem = "/tmp/parbeam_bench_mu";
        m.fwhm = "4,9";
        m.threads = nt;
        auto model = build_model<float>(m, s, x.voxel_size_mm, uniform_angles(a.views));
        ProjectionViews v = model->make_views();
        Volume b = model->make_volume();
        model->forward(x, v); // warm-up: plans and slots exist after this
        model->back(v, b);
        auto t0 = std::chrono::steady_clock::now();
        for (int r = 0; r < a.reps; ++r) model->forward(x, v);
        auto t1 = std::chrono::steady_clock::now();
        for (int r = 0; r < a.reps; ++r) model->back(v, b);
        auto t2 = std::chrono::steady_clock::now();
        double fwd_ms = std::chrono::duration<double, std::milli>(t1 - t0).count() /
                        (double(a.reps) * a.views);
        double bck_ms = std::chrono::duration<double, std::milli>(t2 - t1).count() /
                        (double(a.reps) * a.views);
        std::uint64_t sum = fnv1a64(v.data.data(), v.data.size() * sizeof(float));
        sum = fnv1a64(b.data.data(), b.data.size() * sizeof(float), sum);
        checksums.push_back(sum);
        std::cout << "bench: threads=" << nt << " forward_ms_per_view=" << fwd_ms
                  << " back_ms_per_view=" << bck_ms
                  << " workspace_bytes=" << model->workspace_bytes() << " checksum=" << std::hex
                  << sum << std::dec << "\n";
    }
    bool same = std::all_of(checksums.begin(), checksums.end(),
                            [&](std::uint64_t c) { return c == checksums.front(); });
    std::cout << "bench: checksums " << (same ? "identical" : "DIFFER") << " across thread counts\n";
    write_run_json("bench", "",
                   json{{"shape", a.shape},
                        {"views", a.views},
                        {"threads", a.threads},
                        {"reps", a.reps},
                        {"seed", a.seed}});
    return same ? 0 : 1;
}

} // namespace

int main(int argc, char** argv) {
    try {
        load_file_config(argc, argv);

        CLI::App app{"parallel-beam emission tomography: projection, reconstruction, and "
                     "unrolled CNN-regularized training"};
        app.require_subcommand(1);
        std::string config_path;
        app.add_option("--config", config_path, "JSON file with default flag values")
            ->configurable(false);

        PhantomCmd ph;
        auto* c_ph = app.add_subcommand("phantom", "rasterize a JSON phantom spec into volumes");
        c_ph->add_option("--config", config_path, "JSON file with default flag values");
        require_unless_config(c_ph->add_option("--in", ph.in, "phantom spec (JSON)")
                                  ->default_val(cfg<std::string>("in", "")),
                              "in");
        require_unless_config(c_ph->add_option("--out", ph.out, "output stem")
                                  ->default_val(cfg<std::string>("out", "")),
                              "out");
        c_ph->add_option("--seed", ph.seed, "texture jitter seed")
            ->default_val(cfg<std::uint64_t>("seed", 0));

        ProjectCmd pj;
        auto* c_pj = app.add_subcommand("project", "forward project a volume");
        c_pj->add_option("--config", config_path, "JSON file with default flag values");
        require_unless_config(c_pj->add_option("--in", pj.in, "activity volume stem")
                                  ->default_val(cfg<std::string>("in", "")),
                              "in");
        require_unless_config(c_pj->add_option("--out", pj.out, "output views stem")
                                  ->default_val(cfg<std::string>("out", "")),
                              "out");
        require_unless_config(c_pj->add_option("--views", pj.views, "number of projection angles")
                                  ->default_val(cfg<int>("views", 0)),
                              "views");
        add_model_opts(c_pj, pj.model);

        BackprojectCmd bp;
        auto* c_bp = app.add_subcommand("backproject", "apply the adjoint operator to views");
        c_bp->add_option("--config", config_path, "JSON file with default flag values");
        require_unless_config(c_bp->add_option("--in", bp.in, "views stem")
                                  ->default_val(cfg<std::string>("in", "")),
                              "in");
        require_unless_config(c_bp->add_option("--out", bp.out, "output volume stem")
                                  ->default_val(cfg<std::string>("out", "")),
                              "out");
        c_bp->add_option("--shape", bp.shape, "volume shape nx,ny,nz (or use --mu)")
            ->default_val(cfg<std::string>("shape", ""));
        c_bp->add_option("--voxel-size", bp.voxel, "voxel size mm (one value or vx,vy,vz)")
            ->default_val(cfg<std::string>("voxel-size", "4"));
        add_model_opts(c_bp, bp.model);

        SimulateCmd sm;
        auto* c_sm = app.add_subcommand("simulate", "draw Poisson measurements from a phantom");
        c_sm->add_option("--config", config_path, "JSON file with default flag values");
        require_unless_config(c_sm->add_option("--in", sm.in, "activity volume stem")
                                  ->default_val(cfg<std::string>("in", "")),
                              "in");
        require_unless_config(c_sm->add_option("--out", sm.out, "output stem (_y, _rbar)")
                                  ->default_val(cfg<std::string>("out", "")),
                              "out");
        require_unless_config(c_sm->add_option("--views", sm.views, "number of projection angles")
                                  ->default_val(cfg<int>("views", 0)),
                              "views");
        require_unless_config(
            c_sm->add_option("--total-counts", sm.total_counts, "expected total counts")
                ->default_val(cfg<double>("total-counts", 0.0)),
            "total-counts");
        c_sm->add_option("--scatter-fraction", sm.scatter_fraction,
                         "uniform background counts as a fraction of primaries")
            ->default_val(cfg<double>("scatter-fraction", 0.1));
        c_sm->add_option("--seed", sm.seed, "measurement noise seed")
            ->default_val(cfg<std::uint64_t>("seed", 0));
        add_model_opts(c_sm, sm.model);

        ReconCmd rc;
        auto* c_rc = app.add_subcommand("recon", "reconstruct an activity volume from counts");
        c_rc->add_option("--config", config_path, "JSON file with default flag values");
        require_unless_config(c_rc->add_option("--in", rc.in, "measured counts stem")
                                  ->default_val(cfg<std::string>("in", "")),
                              "in");
        require_unless_config(c_rc->add_option("--rbar", rc.rbar, "background means stem")
                                  ->default_val(cfg<std::string>("rbar", "")),
                              "rbar");
        require_unless_config(c_rc->add_option("--out", rc.out, "output volume stem")
                                  ->default_val(cfg<std::string>("out", "")),
                              "out");
        c_rc->add_option("--algo", rc.algo, "mlem | osem | cnn-em")
            ->default_val(cfg<std::string>("algo", "mlem"));
        c_rc->add_option("--iters", rc.iters, "iterations (cnn-em: warm-start iterations)")
            ->default_val(cfg<int>("iters", 16));
        c_rc->add_option("--subsets", rc.subsets, "ordered subsets")
            ->default_val(cfg<int>("subsets", 4));
        c_rc->add_option("--shape", rc.shape, "volume shape nx,ny,nz (or use --mu)")
            ->default_val(cfg<std::string>("shape", ""));
        c_rc->add_option("--voxel-size", rc.voxel, "voxel size mm")
            ->default_val(cfg<std::string>("voxel-size", "4"));
        c_rc->add_option("--beta", rc.beta, "regularization weight (cnn-em)")
            ->default_val(cfg<double>("beta", 1.0));
        c_rc->add_option("--outer", rc.outer, "unrolled iterations / nets (cnn-em)")
            ->default_val(cfg<int>("outer", 3));
        c_rc->add_option("--inner", rc.inner, "EM steps per unrolled iteration (cnn-em)")
            ->default_val(cfg<int>("inner", 1));
        c_rc->add_option("--nets", rc.nets, "trained weights stem, expects <stem>_net<k>")
            ->default_val(cfg<std::string>("nets", ""));
        add_model_opts(c_rc, rc.model);

        TrainCmd tr;
        auto* c_tr = app.add_subcommand("train", "train unrolled CNN regularizers");
        c_tr->add_option("--config", config_path, "JSON file with default flag values");
        require_unless_config(c_tr->add_option("--in", tr.in, "dataset manifest (JSON)")
                                  ->default_val(cfg<std::string>("in", "")),
                              "in");
        require_unless_config(c_tr->add_option("--out", tr.out, "output stem")
                                  ->default_val(cfg<std::string>("out", "")),
                              "out");
        c_tr->add_option("--method", tr.method, "seq | trunc | e2e")
            ->default_val(cfg<std::string>("method", "e2e"));
        require_unless_config(c_tr->add_option("--epochs", tr.epochs, "training epochs")
                                  ->default_val(cfg<int>("epochs", 0)),
                              "epochs");
        c_tr->add_option("--outer", tr.outer, "unrolled iterations / nets")
            ->default_val(cfg<int>("outer", 3));
        c_tr->add_option("--inner", tr.inner, "EM steps per unrolled iteration")
            ->default_val(cfg<int>("inner", 1));
        c_tr->add_option("--beta", tr.beta, "regularization weight")
            ->default_val(cfg<double>("beta", 1.0));
        c_tr->add_option("--lr", tr.lr, "AdamW learning rate")
            ->default_val(cfg<double>("lr", 0.002));
        c_tr->add_option("--weight-decay", tr.weight_decay, "AdamW weight decay")
            ->default_val(cfg<double>("weight-decay", nn::AdamWConfig{}.weight_decay));
        c_tr->add_option("--seed", tr.seed, "init and shuffle seed")
            ->default_val(cfg<std::uint64_t>("seed", 0));
        c_tr->add_option("--warm-iters", tr.warm_iters, "warm-start OSEM iterations")
            ->default_val(cfg<int>("warm-iters", 16));
        c_tr->add_option("--warm-subsets", tr.warm_subsets, "warm-start OSEM subsets")
            ->default_val(cfg<int>("warm-subsets", 4));
        c_tr->add_option("--checkpoint-every", tr.checkpoint_every,
                         "epochs between checkpoints (0 disables)")
            ->default_val(cfg<int>("checkpoint-every", 0));
        add_model_opts(c_tr, tr.model);

        EvalCmd ev;
        auto* c_ev = app.add_subcommand("eval", "report MAE/NRMSE per labeled region");
        c_ev->add_option("--config", config_path, "JSON file with default flag values");
        require_unless_config(c_ev->add_option("--in", ev.in, "reconstructed volume stem")
                                  ->default_val(cfg<std::string>("in", "")),
                              "in");
        require_unless_config(c_ev->add_option("--truth", ev.truth, "ground-truth volume stem")
                                  ->default_val(cfg<std::string>("truth", "")),
                              "truth");
        require_unless_config(c_ev->add_option("--labels", ev.labels, "label map stem")
                                  ->default_val(cfg<std::string>("labels", "")),
                              "labels");
        require_unless_config(c_ev->add_option("--out", ev.out, "output CSV path")
                                  ->default_val(cfg<std::string>("out", "")),
                              "out");

        AdjointCmd aj;
        auto* c_aj = app.add_subcommand("adjoint-check",
                                        "materialize random operators and compare A' with A^T");
        c_aj->add_option("--config", config_path, "JSON file with default flag values");
        c_aj->add_option("--trials", aj.trials, "number of random systems")
            ->default_val(cfg<int>("trials", 100));
        c_aj->add_option("--shape", aj.shape, "volume shape nx,ny,nz")
            ->default_val(cfg<std::string>("shape", "8,8,6"));
        c_aj->add_option("--views", aj.views, "number of projection angles")
            ->default_val(cfg<int>("views", 7));
        c_aj->add_option("--seed", aj.seed, "system generator seed")
            ->default_val(cfg<std::uint64_t>("seed", 0));
        c_aj->add_option("--threads", aj.threads, "worker threads")
            ->default_val(cfg<int>("threads", 1));

        BenchCmd bn;
        auto* c_bn = app.add_subcommand("bench", "time projections across thread counts");
        c_bn->add_option("--config", config_path, "JSON file with default flag values");
        c_bn->add_option("--shape", bn.shape, "volume shape nx,ny,nz")
            ->default_val(cfg<std::string>("shape", "64,64,40"));
        c_bn->add_option("--views", bn.views, "number of projection angles")
            ->default_val(cfg<int>("views", 128));
        c_bn->add_option("--threads", bn.threads, "comma list of thread counts")
            ->default_val(cfg<std::string>("threads", "1,2,4,8"));
        c_bn->add_option("--reps", bn.reps, "timed repetitions")
            ->default_val(cfg<int>("reps", 2));
        c_bn->add_option("--seed", bn.seed, "phantom seed")
            ->default_val(cfg<std::uint64_t>("seed", 0));

        try {
            app.parse(argc, argv);
        } catch (const CLI::Success& e) {
            return app.exit(e); // --help / --version: prints and exits cleanly
        } catch (const CLI::ParseError& e) {
            app.exit(e);
            return 2;
        }

        if (c_ph->parsed()) return run_phantom(ph);
        if (c_pj->parsed()) return run_project(pj);
        if (c_bp->parsed()) return run_backproject(bp);
        if (c_sm->parsed()) return run_simulate(sm);
        if (c_rc->parsed()) return run_recon(rc);
        if (c_tr->parsed()) return run_train(tr);
        if (c_ev->parsed()) return run_eval(ev);
        if (c_aj->parsed()) return run_adjoint_check(aj);
        if (c_bn->parsed()) return run_bench(bn);
        return 2;
    } catch (const CliUsage& e) {
        std::cerr << "usage error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
