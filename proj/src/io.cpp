#include "volterra/io.hpp"

#include <cinttypes>
#include <cstdio>
#include <fstream>
#include <stdexcept>

namespace volterra {

namespace {

std::string fmt17(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

}  // namespace

json kernel_to_json(const Kernel& k) {
    json j;
    switch (k.kind) {
        case KernelKind::Zero: j["kind"] = "zero"; break;
        case KernelKind::Constant: j["kind"] = "constant"; break;
        case KernelKind::Exponential: j["kind"] = "exponential"; break;
        case KernelKind::Fractional: j["kind"] = "fractional"; break;
        case KernelKind::PowerExponential: j["kind"] = "power_exponential"; break;
    }
    j["alpha"] = k.alpha;
    j["rate"] = k.rate;
    j["scale"] = k.scale;
    return j;
}

Kernel kernel_from_json(const json& j) {
    std::string kind = j.value("kind", "zero");
    double alpha = j.value("alpha", 0.75);
    double rate = j.value("rate", 0.0);
    double scale = j.value("scale", 1.0);
    if (kind == "zero") return Kernel::zero();
    if (kind == "constant") return Kernel::constant(scale);
    if (kind == "exponential") return Kernel::exponential(rate, scale);
    if (kind == "fractional") return Kernel::fractional(alpha, scale);
    if (kind == "power_exponential") return Kernel::power_exponential(alpha, rate, scale);
    throw std::invalid_argument("unknown kernel kind: " + kind);
}

TimeGrid grid_from_json(const json& j) {
    TimeGrid g;
    g.T = j.at("T").get<double>();
    g.N = j.at("N").get<int>();
    g.validate();
    return g;
}

EnsembleSpec ensemble_spec_from_json(const json& j) {
    EnsembleSpec s;
    std::string type = j.value("type", "tree");
    if (type == "tree") {
        s.model = EnsembleModel::Tree;
    } else if (type == "mc" || type == "montecarlo") {
        s.model = EnsembleModel::MonteCarlo;
        s.paths = j.at("paths").get<int>();
        s.seed = j.value("seed", 0ull);
        s.d = j.value("d", 1);
    } else {
        throw std::invalid_argument("unknown ensemble type: " + type);
    }
    return s;
}

json finite_or_string(double v) {
    if (std::isfinite(v)) return v;
    return v > 0 ? json("inf") : json("-inf");
}

json domain_report_to_json(const DomainReport& r) {
    json j;
    j["family"] = r.family;
    j["rho_star"] = finite_or_string(r.rho_star);
    j["margin"] = finite_or_string(r.margin);
    j["contraction"] = finite_or_string(r.contraction);
    j["admissible"] = r.admissible;
    if (!r.diagnostic.empty()) j["diagnostic"] = r.diagnostic;
    return j;
}

json bsvie_margin_to_json(const BsvieMargin& m, double eta, double lambda) {
    json j;
    j["family"] = "bsvie";
    j["eta"] = eta;
    j["lambda"] = lambda;
    j["margin"] = finite_or_string(m.margin);
    j["c_eta_lambda"] = finite_or_string(m.c_eta_lambda);
    j["admissible"] = m.admissible();
    return j;
}

json control_admissibility_to_json(const ControlAdmissibility& a, double mu, double lambda) {
    json j;
    j["family"] = "control";
    j["mu"] = mu;
    j["lambda"] = lambda;
    j["ok"] = a.ok;
    j["rho_star"] = finite_or_string(a.rho_star);
    if (!a.failure.empty()) j["failure"] = a.failure;
    return j;
}

void atomic_write(const std::filesystem::path& path, const std::string& contents) {
    std::filesystem::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw std::runtime_error("cannot open " + tmp.string());
        out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
        if (!out) throw std::runtime_error("short write to " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

std::string process_to_csv(const FilteredEnsemble& ens, const AdaptedProcess& p) {
    std::string out = "path,t";
    for (int c = 0; c < p.dim; ++c) out += ",v" + std::to_string(c);
    out += "\n";
    for (int path = 0; path < p.paths; ++path) {
        for (int node = 0; node < p.nodes; ++node) {
            out += std::to_string(path);
            out += ',';
            out += fmt17(ens.grid().node(node));
            auto v = p.at(path, node);
            for (int c = 0; c < p.dim; ++c) {
                out += ',';
                out += fmt17(v[c]);
            }
            out += '\n';
        }
    }
    return out;
}

void write_z_grid(const std::filesystem::path& bin_path, const std::filesystem::path& json_path,
                  const FilteredEnsemble& ens, const TwoParameterProcess& z) {
    json header;
    header["paths"] = z.paths;
    header["rows"] = z.rows;
    header["cols"] = z.cols;
    header["dim"] = z.dim;
    header["grid"] = {{"T", ens.grid().T}, {"N", ens.grid().N}};
    header["dtype"] = "float64";
    header["order"] = "path,row,col,dim";
    atomic_write(json_path, header.dump(2) + "\n");
    std::string raw(reinterpret_cast<const char*>(z.v.data()), z.v.size() * sizeof(double));
    atomic_write(bin_path, raw);
}

TwoParameterProcess read_z_grid(const std::filesystem::path& bin_path,
                                const std::filesystem::path& json_path) {
    std::ifstream hj(json_path);
    if (!hj) throw std::runtime_error("cannot open " + json_path.string());
    json header = json::parse(hj);
    TwoParameterProcess z = TwoParameterProcess::zeros(
        header.at("paths").get<int>(), header.at("rows").get<int>(),
        header.at("cols").get<int>(), header.at("dim").get<int>());
    std::ifstream bin(bin_path, std::ios::binary);
    if (!bin) throw std::runtime_error("cannot open " + bin_path.string());
    bin.read(reinterpret_cast<char*>(z.v.data()),
             static_cast<std::streamsize>(z.v.size() * sizeof(double)));
    if (static_cast<std::size_t>(bin.gcount()) != z.v.size() * sizeof(double)) {
        throw std::runtime_error("short read from " + bin_path.string());
    }
    return z;
}

std::uint64_t config_hash(const json& j) {
    std::string s = j.dump();
    std::uint64_t h = 1469598103934665603ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

json iteration_trace_to_json(const IterationTrace& t) {
    json j;
    j["mode"] = t.mode;
    j["levels"] = json::array();
    for (const auto& l : t.levels) {
        json lvl;
        lvl["gamma0"] = l.gamma0;
        lvl["gamma"] = l.gamma;
        lvl["theory_ratio"] = finite_or_string(l.theory_ratio);
        lvl["measured_ratio"] = l.measured_ratio;
        lvl["sweeps"] = l.sweeps;
        lvl["distances"] = l.distances;
        j["levels"].push_back(lvl);
    }
    return j;
}

}  // namespace volterra
