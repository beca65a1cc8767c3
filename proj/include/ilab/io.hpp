#pragma once

#include <filesystem>
#include <string>

#include "ilab/model.hpp"

namespace ilab {

// CSV with header x0,...,x{d-1},y; doubles, label strictly 0 or 1. Malformed
// rows are reported with their line number.
Dataset load_dataset(const std::filesystem::path& path);
void save_dataset(const Dataset& data, const std::filesystem::path& path);

// Parameters as JSON: layout header + flat value array. Values round-trip
// bit-exactly.
void save_params(const ParamVector& params, const std::filesystem::path& path);
ParamVector load_params(const std::filesystem::path& path);

}  // namespace ilab
