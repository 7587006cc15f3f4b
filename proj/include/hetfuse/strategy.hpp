#pragma once

#include <string>
#include <string_view>

#include "hetfuse/errors.hpp"

namespace hetfuse {

/// Which observations feed the forward generator.
///   HSS  - LR MS + SAR          (heterogeneous spatio-spectral)
///   ST   - LR MS + t2 HR MS     (spatio-temporal)
///   HSST - LR MS + SAR + t2 MS  (heterogeneous spatio-spectral-temporal)
enum class FusionStrategy { HSS, ST, HSST };

constexpr bool uses_sar(FusionStrategy s) { return s != FusionStrategy::ST; }
constexpr bool uses_temporal(FusionStrategy s) { return s != FusionStrategy::HSS; }

/// Forward generator input channels: B for X-hat, plus b (SAR) and/or B (t2 MS).
constexpr std::size_t forward_in_channels(FusionStrategy s, std::size_t ms_bands,
                                          std::size_t sar_bands) {
  return ms_bands + (uses_sar(s) ? sar_bands : 0) + (uses_temporal(s) ? ms_bands : 0);
}

/// Backward generator output channels: the regenerated SAR and/or t2 MS.
constexpr std::size_t backward_out_channels(FusionStrategy s, std::size_t ms_bands,
                                            std::size_t sar_bands) {
  return (uses_sar(s) ? sar_bands : 0) + (uses_temporal(s) ? ms_bands : 0);
}

inline std::string to_string(FusionStrategy s) {
  switch (s) {
    case FusionStrategy::HSS: return "hss";
    case FusionStrategy::ST: return "st";
    case FusionStrategy::HSST: return "hsst";
  }
  return "?";
}

inline FusionStrategy parse_strategy(std::string_view text) {
  if (text == "hss" || text == "HSS") return FusionStrategy::HSS;
  if (text == "st" || text == "ST") return FusionStrategy::ST;
  if (text == "hsst" || text == "HSST") return FusionStrategy::HSST;
  throw ConfigError("strategy", "expected one of hss, st, hsst; got '" + std::string(text) + "'");
}

}  // namespace hetfuse
