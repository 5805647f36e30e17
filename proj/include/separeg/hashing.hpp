// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "json.hpp"

#include <string>
#include <string_view>

namespace separeg {

/// Lower-case hex SHA-256 digest.
std::string sha256_hex(std::string_view bytes);

/// Hash of the canonical (sorted-key, compact) JSON text; stable under key reordering.
std::string config_hash(const nlohmann::json& config);

} // namespace separeg
