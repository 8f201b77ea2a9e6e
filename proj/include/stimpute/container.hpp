#ifndef STIMPUTE_CONTAINER_HPP
#define STIMPUTE_CONTAINER_HPP

#include <filesystem>
#include <map>
#include <string>
#include <string_view>

#include <nlohmann/json.hpp>

#include "stimpute/model.hpp"

namespace stimpute {

/**
 * Self-describing binary container used for checkpoints and fitted baselines.
 *
 * Layout: 8-byte magic "STIMPUTE", u32 format version, u64 header length,
 * a JSON header {type, format_version, metadata, tensors[name, shape, offset]},
 * then every tensor as little-endian float64 in header order. Output bytes
 * depend only on the contents (JSON keys and tensor names are sorted).
 */
struct Container {
  static constexpr std::uint32_t kFormatVersion = 1;

  std::string type;
  nlohmann::json metadata = nlohmann::json::object();
  std::map<std::string, Tensor<double>> tensors;

  std::string serialize() const;
  static Container deserialize(std::string_view bytes);

  void write(const std::filesystem::path& path) const;
  /// Reads a container; throws ParseError if `expected_type` is non-empty and differs.
  static Container read(const std::filesystem::path& path, const std::string& expected_type = {});
};

template <typename Scalar>
Container to_container(const Model<Scalar>& model, const nlohmann::json& extra = nlohmann::json::object());

template <typename Scalar>
Model<Scalar> model_from_container(const Container& container);

}  // namespace stimpute

#endif  // STIMPUTE_CONTAINER_HPP
