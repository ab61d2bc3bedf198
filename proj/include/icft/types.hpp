#pragma once

#include <cstdint>
#include <vector>

namespace icft {

using TokenId = std::int32_t;
using Tokens = std::vector<TokenId>;

}  // namespace icft
