// Batch front end: parse problem specs, run the solvers and checks, emit
// machine-readable results (JSON reports, CSV time series, binary Z grids).

#include "volterra/control.hpp"
#include "volterra/io.hpp"
#include "volterra/linear.hpp"

#include "CLI11.hpp"

#include <cstdlib>
#include <fstream>
#include <iostream>

namespace vt = volterra;
using vt::json;

namespace {

int log_level() {
    const char* env = std::getenv("VOLTERRA_LOG");
    if (!env) return 0;
    std::string v = env;
    if (v == "debug") return 2;
    if (v == "info") return 1;
    return 0;
}

void log_info(const std::string& msg) {
    if (log_level() >= 1) std::cerr << "[volterra] " << msg << "\n";
}

struct RunConfig {
    std::string config_path;
    std::string out_dir;
    std::uint64_t seed = 0;
    bool seed_set = false;
    int threads = 1;
    std::string grid_override;      // "T,N"
    std::string ensemble_override;  // "tree" | "mc:M"
    json cfg;

    vt::TimeGrid grid() const {
        if (!grid_override.empty()) {
            auto comma = grid_override.find(',');
            if (comma == std::string::npos) throw std::invalid_argument("--grid expects T,N");
            vt::TimeGrid g;
            g.T = std::stod(grid_override.substr(0, comma));
            g.N = std::stoi(grid_override.substr(comma + 1));
            g.validate();
            return g;
        }
        return vt::grid_from_json(cfg.at("grid"));
    }

    vt::FilteredEnsemble ensemble() const {
        vt::EnsembleSpec spec;
        if (!ensemble_override.empty()) {
            if (ensemble_override == "tree") {
                spec.model = vt::EnsembleModel::Tree;
            } else if (ensemble_override.rfind("mc:", 0) == 0) {
                spec.model = vt::EnsembleModel::MonteCarlo;
                spec.paths = std::stoi(ensemble_override.substr(3));
            } else {
                throw std::invalid_argument("--ensemble expects tree|mc:M");
            }
        } else if (cfg.contains("ensemble")) {
            spec = vt::ensemble_spec_from_json(cfg.at("ensemble"));
        }
        if (seed_set) spec.seed = seed;
        return vt::build_ensemble(grid(), spec);
    }
};

void write_manifest(const RunConfig& rc, const std::string& command,
                    const std::vector<std::string>& outputs) {
    json m;
    m["command"] = command;
    m["config"] = rc.cfg;
    char hex[32];
    std::snprintf(hex, sizeof(hex), "%016llx",
                  static_cast<unsigned long long>(vt::config_hash(rc.cfg)));
    m["config_hash"] = std::string(hex);
    m["seed"] = rc.seed;
    m["threads"] = rc.threads;
    m["version"] = "0.1.0";
    m["outputs"] = outputs;
    vt::atomic_write(std::filesystem::path(rc.out_dir) / "manifest.json", m.dump(2) + "\n");
}

// --------------------------------------------------------------------------
// Named coefficient forms
// --------------------------------------------------------------------------

vt::AdaptedProcess psi_from_json(const json& j, const vt::FilteredEnsemble& ens) {
    std::string form = j.value("form", "constant");
    const int N = ens.grid().N;
    if (form == "constant") {
        double v = j.value("value", 1.0);
        return vt::AdaptedProcess::constant(ens, std::vector<double>{v});
    }
    if (form == "det_exp") {
        double scale = j.value("scale", 1.0), rate = j.value("rate", 1.0);
        return vt::AdaptedProcess::from_fn(ens, 1, [&, scale, rate](int, int i,
                                                                    std::span<double> out) {
            out[0] = scale * std::exp(-rate * ens.grid().node(i));
        });
    }
    if (form == "w_affine") {
        // e^{-decay t} (a + b W(T)): F_infinity-measurable, not adapted.
        double a = j.value("a", 1.0), b = j.value("b", 1.0), decay = j.value("decay", 0.0);
        return vt::AdaptedProcess::from_fn(ens, 1, [&, a, b, decay](int p, int i,
                                                                    std::span<double> out) {
            out[0] = std::exp(-decay * ens.grid().node(i)) * (a + b * ens.wiener(p, N));
        });
    }
    if (form == "w_affine_adapted") {
        // a + b W(t): adapted.
        double a = j.value("a", 1.0), b = j.value("b", 1.0);
        return vt::AdaptedProcess::from_fn(ens, 1, [&, a, b](int p, int i, std::span<double> out) {
            out[0] = a + b * ens.wiener(p, i);
        });
    }
    throw std::invalid_argument("unknown psi/phi form: " + form);
}

vt::BsvieDriver driver_from_json(const json& j) {
    vt::BsvieDriver d;
    std::string form = j.value("form", "zero");
    if (form == "zero") {
        d.zero = true;
        d.depends_y = d.depends_z1 = d.depends_z2 = false;
        d.lip_y = d.lip_z1 = d.lip_z2 = vt::Kernel::zero();
        return d;
    }
    if (form == "linear") {
        double cy = j.value("cy", 0.0), cz1 = j.value("cz1", 0.0), cz2 = j.value("cz2", 0.0);
        d.eval = [cy, cz1, cz2](int, int, int, std::span<const double> y,
                                std::span<const double> z1, std::span<const double> z2,
                                std::span<double> out) {
            out[0] = cy * y[0] + cz1 * z1[0] + cz2 * z2[0];
        };
        d.lip_y = cy == 0.0 ? vt::Kernel::zero() : vt::Kernel::constant(std::fabs(cy));
        d.lip_z1 = cz1 == 0.0 ? vt::Kernel::zero() : vt::Kernel::constant(std::fabs(cz1));
        d.lip_z2 = cz2 == 0.0 ? vt::Kernel::zero() : vt::Kernel::constant(std::fabs(cz2));
        d.depends_y = cy != 0.0;
        d.depends_z1 = cz1 != 0.0;
        d.depends_z2 = cz2 != 0.0;
        return d;
    }
    if (form == "factored_y") {
        vt::Kernel k = vt::kernel_from_json(j.at("kernel"));
        double c = j.value("c", 1.0);
        d.factor = k;
        d.eval = [c](int, int, int, std::span<const double> y, std::span<const double>,
                     std::span<const double>, std::span<double> out) { out[0] = c * y[0]; };
        vt::Kernel env = k;
        env.scale *= std::fabs(c);
        d.lip_y = env;
        d.lip_z1 = d.lip_z2 = vt::Kernel::zero();
        d.depends_z1 = d.depends_z2 = false;
        return d;
    }
    throw std::invalid_argument("unknown driver form: " + form);
}

vt::SvieCoeff svie_coeff_from_json(const json& j, bool diffusion) {
    vt::SvieCoeff c;
    std::string form = j.value("form", "zero");
    if (form == "zero") {
        c.zero = true;
        c.lip_x = c.lip_u = vt::Kernel::zero();
        return c;
    }
    if (form == "kernel_affine") {
        // f = K(t-s) (a x + c0), factored for weight-exact product integration.
        vt::Kernel k = vt::kernel_from_json(j.at("kernel"));
        double a = j.value("a", 0.0), c0 = j.value("c0", 0.0);
        c.factor = k;
        c.eval_reduced = [a, c0](double, int, std::span<const double> x, std::span<const double>,
                                 std::span<double> out) { out[0] = a * x[0] + c0; };
        vt::Kernel env = k;
        env.scale *= std::fabs(a);
        c.lip_x = a == 0.0 ? vt::Kernel::zero() : env;
        c.lip_u = vt::Kernel::zero();
        return c;
    }
    if (form == "constant" && diffusion) {
        double c0 = j.value("c0", 1.0);
        c.eval = [c0](double, double, int, std::span<const double>, std::span<const double>,
                      std::span<double> out) { out[0] = c0; };
        c.lip_x = c.lip_u = vt::Kernel::zero();
        return c;
    }
    throw std::invalid_argument("unknown svie coefficient form: " + form);
}

// --------------------------------------------------------------------------
// Commands
// --------------------------------------------------------------------------

int cmd_domain(const RunConfig& rc) {
    const json& d = rc.cfg.at("domain");
    std::string family = d.value("family", "svie");
    json report;
    bool admissible = false;
    if (family == "svie") {
        vt::Kernel kb = vt::kernel_from_json(d.at("kb"));
        vt::Kernel ks = vt::kernel_from_json(d.at("ksigma"));
        auto r = vt::svie_domain_report(kb, ks, d.value("mu", 1.0));
        report = vt::domain_report_to_json(r);
        admissible = r.admissible;
    } else if (family == "bsvie") {
        auto m = vt::bsvie_margin(vt::kernel_from_json(d.at("kgy")),
                                  vt::kernel_from_json(d.at("kgz1")),
                                  vt::kernel_from_json(d.at("kgz2")), d.at("eta").get<double>(),
                                  d.at("lambda").get<double>());
        report = vt::bsvie_margin_to_json(m, d.at("eta").get<double>(),
                                          d.at("lambda").get<double>());
        admissible = m.admissible();
    } else if (family == "control") {
        vt::ControlKernels k{vt::kernel_from_json(d.at("kbx")),
                             vt::kernel_from_json(d.at("kbu")),
                             vt::kernel_from_json(d.at("ksx")),
                             vt::kernel_from_json(d.at("ksu"))};
        auto a = vt::control_admissible(k, d.at("mu").get<double>(), d.at("lambda").get<double>());
        report = vt::control_admissibility_to_json(a, d.at("mu").get<double>(),
                                                   d.at("lambda").get<double>());
        admissible = a.ok;
    } else {
        throw std::invalid_argument("unknown domain family: " + family);
    }
    vt::atomic_write(std::filesystem::path(rc.out_dir) / "report.json", report.dump(2) + "\n");
    write_manifest(rc, "domain", {"report.json"});
    return admissible ? 0 : 2;
}

int cmd_simulate_svie(const RunConfig& rc) {
    auto ens = rc.ensemble();
    const json& s = rc.cfg.at("svie");
    vt::SvieProblem p;
    p.n = 1;
    p.phi = vt::AdaptedProcess::constant(ens, std::vector<double>{s.value("x0", 0.0)});
    p.drift = svie_coeff_from_json(s.at("drift"), false);
    p.diffusion = svie_coeff_from_json(s.at("diffusion"), true);
    p.mu = s.value("mu", 1.0);
    vt::SvieDiagnostics diag;
    auto X = vt::solve_svie(p, ens, &diag);
    if (diag.plain_weight_warning) {
        log_info("general coefficient without a declared factor: plain rectangle weights");
    }
    vt::atomic_write(std::filesystem::path(rc.out_dir) / "X.csv", vt::process_to_csv(ens, X));
    json extra;
    extra["margin"] = diag.margin;
    vt::atomic_write(std::filesystem::path(rc.out_dir) / "diagnostics.json",
                     extra.dump(2) + "\n");
    write_manifest(rc, "simulate-svie", {"X.csv", "diagnostics.json"});
    return 0;
}

vt::BsvieProblem bsvie_problem_from_json(const json& b, const vt::FilteredEnsemble& ens) {
    vt::BsvieProblem p;
    p.m = 1;
    p.psi = psi_from_json(b.at("psi"), ens);
    p.driver = driver_from_json(b.at("driver"));
    p.eta = b.at("eta").get<double>();
    p.lambda = b.at("lambda").get<double>();
    return p;
}

int cmd_solve_bsvie(const RunConfig& rc) {
    auto ens = rc.ensemble();
    vt::BsvieProblem p = bsvie_problem_from_json(rc.cfg.at("bsvie"), ens);
    vt::BsvieOptions opts;
    opts.tol = rc.cfg.value("tolerance", -1.0);
    auto sol = vt::solve_bsvie(p, ens, opts);
    std::filesystem::path out(rc.out_dir);
    vt::atomic_write(out / "Y.csv", vt::process_to_csv(ens, sol.Y));
    vt::write_z_grid(out / "Z.bin", out / "Z.json", ens, sol.Z);
    json diag;
    diag["equation_residual"] = sol.equation_residual;
    diag["m_residual"] = sol.m_residual;
    diag["trace"] = vt::iteration_trace_to_json(sol.trace);
    auto chk = vt::apriori_check(sol, p, ens);
    diag["apriori"] = {{"lhs", chk.lhs}, {"rhs", vt::finite_or_string(chk.rhs)}, {"ok", chk.ok}};
    vt::atomic_write(out / "diagnostics.json", diag.dump(2) + "\n");
    write_manifest(rc, "solve-bsvie", {"Y.csv", "Z.bin", "Z.json", "diagnostics.json"});
    return 0;
}

int cmd_check_duality(const RunConfig& rc) {
    auto ens = rc.ensemble();
    const json& d = rc.cfg.at("duality");
    vt::LinearSvieSpec fwd;
    fwd.n = 1;
    double cs = d.value("c_scale", 0.0), cr = d.value("c_rate", 0.0);
    double ds = d.value("d_scale", 0.0);
    fwd.C_zero = cs == 0.0;
    fwd.D_zero = ds == 0.0;
    fwd.C = [cs, cr](double t, double s, int, std::span<double> out) {
        out[0] = cs * std::exp(-cr * (t - s));
    };
    fwd.D = [ds](double, double, int, int, std::span<double> out) { out[0] = ds; };
    fwd.KC = cs == 0.0 ? vt::Kernel::zero() : vt::Kernel::exponential(cr, std::fabs(cs));
    fwd.KD = ds == 0.0 ? vt::Kernel::zero() : vt::Kernel::constant(std::fabs(ds));
    auto phi = psi_from_json(d.at("phi"), ens);
    auto psi = psi_from_json(d.at("psi"), ens);
    auto r = vt::duality_check(fwd, phi, psi, d.at("mu").get<double>(),
                               d.at("eta").get<double>(), d.at("lambda").get<double>(), ens);
    json rep;
    rep["lhs"] = r.lhs;
    rep["rhs"] = r.rhs;
    rep["gap"] = r.gap;
    vt::atomic_write(std::filesystem::path(rc.out_dir) / "duality.json", rep.dump(2) + "\n");
    write_manifest(rc, "check-duality", {"duality.json"});
    return 0;
}

int cmd_voc(const RunConfig& rc) {
    auto ens = rc.ensemble();
    const json& v = rc.cfg.at("voc");
    vt::LinearBsvieSpec spec;
    spec.m = 1;
    double as = v.value("a_scale", 0.0), ar = v.value("a_rate", 0.0);
    double bs = v.value("b_scale", 0.0);
    spec.A_zero = as == 0.0;
    spec.B_zero = bs == 0.0;
    spec.A = [as, ar](double t, double s, int, std::span<double> out) {
        out[0] = as * std::exp(-ar * (s - t));
    };
    spec.B = [bs](double, double, int, int, std::span<double> out) { out[0] = bs; };
    spec.KA = as == 0.0 ? vt::Kernel::zero() : vt::Kernel::exponential(ar, std::fabs(as));
    spec.KB = bs == 0.0 ? vt::Kernel::zero() : vt::Kernel::constant(std::fabs(bs));
    spec.eta = v.at("eta").get<double>();
    spec.lambda = v.at("lambda").get<double>();
    auto psi = psi_from_json(v.at("psi"), ens);
    auto res = vt::variation_of_constants(spec, psi, ens, v.value("compare", true));
    std::filesystem::path out(rc.out_dir);
    vt::atomic_write(out / "Y.csv", vt::process_to_csv(ens, res.Y));
    json rep;
    rep["gap"] = res.gap;
    vt::atomic_write(out / "voc.json", rep.dump(2) + "\n");
    write_manifest(rc, "voc", {"Y.csv", "voc.json"});
    return 0;
}

int cmd_bsde_reduce(const RunConfig& rc) {
    auto ens = rc.ensemble();
    const json& b = rc.cfg.at("bsde");
    vt::BsvieProblem p = bsvie_problem_from_json(b, ens);
    auto sol = vt::solve_bsvie(p, ens);
    auto red = vt::bsvie_to_bsde(sol, p.lambda, b.at("mu").get<double>(), ens);
    std::filesystem::path out(rc.out_dir);
    vt::atomic_write(out / "cY.csv", vt::process_to_csv(ens, red.cY));
    vt::atomic_write(out / "cZ.csv", vt::process_to_csv(ens, red.cZ));
    json rep;
    rep["bsde_residual_norm"] = red.residual_norm;
    vt::atomic_write(out / "reduction.json", rep.dump(2) + "\n");
    write_manifest(rc, "bsde-reduce", {"cY.csv", "cZ.csv", "reduction.json"});
    return 0;
}

int cmd_optimize(const RunConfig& rc) {
    auto ens = rc.ensemble();
    const json& o = rc.cfg.at("optimize");
    const json& pj = o.at("problem");
    std::string form = pj.value("form", "lq");
    vt::ControlProblem p;
    if (form == "lq") {
        vt::LqSpec s;
        if (pj.contains("a")) s.A = vt::kernel_from_json(pj.at("a"));
        if (pj.contains("b")) s.B = vt::kernel_from_json(pj.at("b"));
        if (pj.contains("c")) s.C = vt::kernel_from_json(pj.at("c"));
        if (pj.contains("d")) s.D = vt::kernel_from_json(pj.at("d"));
        s.m1 = pj.value("m1", 1.0);
        s.m2 = pj.value("m2", 1.0);
        s.m3 = pj.value("m3", 0.0);
        s.x0 = pj.value("x0", 1.0);
        s.mu = pj.value("mu", 1.0);
        s.lambda = pj.value("lambda", 2.0);
        p = vt::make_lq_problem(s, ens);
    } else if (form == "caputo") {
        vt::CaputoSpec s;
        s.alpha = pj.value("alpha", 0.75);
        s.bx = pj.value("bx", 0.0);
        s.bu = pj.value("bu", 0.0);
        s.b0 = pj.value("b0", 0.0);
        s.sx = pj.value("sx", 0.0);
        s.su = pj.value("su", 0.0);
        s.s0 = pj.value("s0", 0.0);
        s.m1 = pj.value("m1", 1.0);
        s.m2 = pj.value("m2", 1.0);
        s.m3 = pj.value("m3", 0.0);
        s.x0 = pj.value("x0", 1.0);
        s.lambda = pj.value("lambda", 2.0);
        s.mu = pj.value("mu", -1.0);
        p = vt::make_caputo_problem(s, ens);
    } else if (form == "sde") {
        vt::SdeSpec s;
        s.bx = pj.value("bx", 0.0);
        s.bu = pj.value("bu", 0.0);
        s.b0 = pj.value("b0", 0.0);
        s.sx = pj.value("sx", 0.0);
        s.su = pj.value("su", 0.0);
        s.s0 = pj.value("s0", 0.0);
        s.m1 = pj.value("m1", 1.0);
        s.m2 = pj.value("m2", 1.0);
        s.m3 = pj.value("m3", 0.0);
        s.x0 = pj.value("x0", 1.0);
        s.mu = pj.value("mu", 1.0);
        s.lambda = pj.value("lambda", 2.0);
        p = vt::make_sde_problem(s, ens);
    } else if (form == "integro") {
        vt::IntegroSpec s;
        s.x0 = pj.value("x0", 1.0);
        s.bx = pj.value("bx", 0.0);
        s.bu = pj.value("bu", 0.0);
        s.b1 = pj.value("b1", 0.0);
        s.b2 = pj.value("b2", 0.0);
        s.b0 = pj.value("b0", 0.0);
        s.sx = pj.value("sx", 0.0);
        s.su = pj.value("su", 0.0);
        s.s3 = pj.value("s3", 0.0);
        s.s4 = pj.value("s4", 0.0);
        if (pj.contains("A1")) s.A1 = vt::kernel_from_json(pj.at("A1"));
        if (pj.contains("A2")) s.A2 = vt::kernel_from_json(pj.at("A2"));
        if (pj.contains("A3")) s.A3 = vt::kernel_from_json(pj.at("A3"));
        if (pj.contains("A4")) s.A4 = vt::kernel_from_json(pj.at("A4"));
        s.m1 = pj.value("m1", 1.0);
        s.m2 = pj.value("m2", 1.0);
        s.m3 = pj.value("m3", 0.0);
        s.mu = pj.value("mu", 1.0);
        s.lambda = pj.value("lambda", 2.0);
        p = vt::integro_lift(s, ens).problem;
    } else {
        throw std::invalid_argument("unknown problem form: " + form);
    }
    if (pj.contains("box")) {
        double lo = pj.at("box").at(0).get<double>(), hi = pj.at("box").at(1).get<double>();
        p.project = [lo, hi](std::span<double> u) {
            for (double& v : u) v = std::clamp(v, lo, hi);
        };
    }

    vt::OptimizeOptions opts;
    opts.tol = o.value("tol", 1e-6);
    opts.max_iters = o.value("max_iters", 500);
    auto u0 = vt::AdaptedProcess::constant(ens, std::vector<double>{o.value("u0", 0.0)});
    auto res = vt::optimize(p, u0, ens, opts);

    std::filesystem::path out(rc.out_dir);
    vt::atomic_write(out / "u.csv", vt::process_to_csv(ens, res.u));
    json rep;
    rep["status"] = res.status;
    rep["J"] = res.report.J;
    rep["r"] = res.report.r;
    rep["adjoint_equation_residual"] = res.report.adjoint_equation_residual;
    rep["adjoint_m_residual"] = res.report.adjoint_m_residual;
    rep["convexity_certificate"] = res.report.convexity_certificate;
    vt::atomic_write(out / "report.json", rep.dump(2) + "\n");
    std::string trace = "iter,J,r,step\n";
    for (const auto& row : res.trace) {
        char buf[120];
        std::snprintf(buf, sizeof(buf), "%d,%.17g,%.17g,%.17g\n", row.iter, row.J, row.r,
                      row.step);
        trace += buf;
    }
    vt::atomic_write(out / "trace.csv", trace);
    write_manifest(rc, "optimize", {"u.csv", "report.json", "trace.csv"});
    return res.status == "converged" ? 0 : 2;
}

bool is_admissibility_error(const std::exception& e) {
    std::string msg = e.what();
    return msg.find("inadmissible") != std::string::npos ||
           msg.find("admissibility") != std::string::npos ||
           msg.find("requires") != std::string::npos;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Infinite-horizon stochastic Volterra toolkit"};
    app.require_subcommand(1);
    app.fallthrough();  // global flags may follow the subcommand

    RunConfig rc;
    app.add_option("--config", rc.config_path, "problem spec JSON")->required();
    app.add_option("--out", rc.out_dir, "output directory")->required();
    auto* seed_opt = app.add_option("--seed", rc.seed, "Monte Carlo seed override");
    app.add_option("--threads", rc.threads, "worker thread cap");
    app.add_option("--grid", rc.grid_override, "grid override T,N");
    app.add_option("--ensemble", rc.ensemble_override, "ensemble override tree|mc:M");

    auto* c_domain = app.add_subcommand("domain", "admissibility-domain calculus");
    auto* c_sim = app.add_subcommand("simulate-svie", "forward SVIE simulation");
    auto* c_solve = app.add_subcommand("solve-bsvie", "adapted M-solution of a BSVIE");
    auto* c_dual = app.add_subcommand("check-duality", "duality-principle gap report");
    auto* c_voc = app.add_subcommand("voc", "variation-of-constants comparison");
    auto* c_red = app.add_subcommand("bsde-reduce", "BSVIE -> BSDE reduction");
    auto* c_opt = app.add_subcommand("optimize", "projected-gradient control optimization");

    CLI11_PARSE(app, argc, argv);
    rc.seed_set = seed_opt->count() > 0;

    try {
        std::ifstream in(rc.config_path);
        if (!in) {
            std::cerr << "cannot open config: " << rc.config_path << "\n";
            return 1;
        }
        rc.cfg = json::parse(in);
        std::filesystem::create_directories(rc.out_dir);
        vt::set_thread_cap(rc.threads);

        if (c_domain->parsed()) return cmd_domain(rc);
        if (c_sim->parsed()) return cmd_simulate_svie(rc);
        if (c_solve->parsed()) return cmd_solve_bsvie(rc);
        if (c_dual->parsed()) return cmd_check_duality(rc);
        if (c_voc->parsed()) return cmd_voc(rc);
        if (c_red->parsed()) return cmd_bsde_reduce(rc);
        if (c_opt->parsed()) return cmd_optimize(rc);
        return 1;
    } catch (const json::exception& e) {
        std::cerr << "config parse error: " << e.what() << "\n";
        return 1;
    } catch (const std::invalid_argument& e) {
        std::cerr << "invalid configuration: " << e.what() << "\n";
        return 1;
    } catch (const std::runtime_error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return is_admissibility_error(e) ? 2 : 1;
    }
}
