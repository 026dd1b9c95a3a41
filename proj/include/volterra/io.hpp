#pragma once

#include "volterra/bsvie.hpp"
#include "volterra/ensemble.hpp"
#include "volterra/kernel.hpp"

#include "json.hpp"

#include <filesystem>
#include <string>

namespace volterra {

using json = nlohmann::json;

json kernel_to_json(const Kernel& k);
Kernel kernel_from_json(const json& j);

TimeGrid grid_from_json(const json& j);
EnsembleSpec ensemble_spec_from_json(const json& j);

json domain_report_to_json(const DomainReport& r);
json bsvie_margin_to_json(const BsvieMargin& m, double eta, double lambda);
json control_admissibility_to_json(const ControlAdmissibility& a, double mu, double lambda);

/// Serializes +-inf as the strings "inf"/"-inf" (JSON has no infinities).
json finite_or_string(double v);

/// Atomic write: temp file in the same directory, then rename.
void atomic_write(const std::filesystem::path& path, const std::string& contents);

/// CSV with columns path,t,v0,...,v{dim-1}; fixed 17-significant-digit
/// formatting so identical runs are byte-identical.
std::string process_to_csv(const FilteredEnsemble& ens, const AdaptedProcess& p);

/// Z grid: raw little-endian row-major doubles plus a JSON header carrying the
/// dims and grid for bit-exact reload.
void write_z_grid(const std::filesystem::path& bin_path, const std::filesystem::path& json_path,
                  const FilteredEnsemble& ens, const TwoParameterProcess& z);
TwoParameterProcess read_z_grid(const std::filesystem::path& bin_path,
                                const std::filesystem::path& json_path);

/// FNV-1a over the canonical dump; manifests record it for reproducibility.
std::uint64_t config_hash(const json& j);

json iteration_trace_to_json(const IterationTrace& t);

}  // namespace volterra
