#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "nowcast/models.hpp"

namespace nowcast {

enum ExitCode : int {
  kExitOk = 0,
  kExitFailure = 1,
  kExitUsage = 2,
  kExitCorrupt = 3,
  kExitDivergence = 4,
};

/// Runs the `nowcastlab` command line. `args` excludes the program name.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int run_cli(const std::vector<std::string>& args);

/// Reference parameter counts per variant (nullopt for persistence).
std::optional<std::int64_t> reference_parameter_count(ModelVariant variant);

/// Applies NOWCASTLAB_THREADS (if set) to OpenMP and Eigen.
void apply_thread_limit();

/// 8-bit RGB PNG of a rain grid in mm/h, colour-scaled to [0, vmax].
void write_rain_png(const std::filesystem::path& file, const Grid2D& grid, double vmax);

}  // namespace nowcast
