#include "stimpute/container.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

namespace stimpute {

static_assert(std::endian::native == std::endian::little, "container format assumes a little-endian host");

namespace {

constexpr char kMagic[8] = {'S', 'T', 'I', 'M', 'P', 'U', 'T', 'E'};

template <typename T>
void append_raw(std::string& out, const T& value) {
  out.append(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
T read_raw(std::string_view bytes, std::size_t& pos) {
  if (pos + sizeof(T) > bytes.size()) throw ParseError("container truncated");
  T value;
  std::memcpy(&value, bytes.data() + pos, sizeof(T));
  pos += sizeof(T);
  return value;
}

template <typename Scalar>
const char* precision_name() {
  return sizeof(Scalar) == 4 ? "float32" : "float64";
}

}  // namespace

std::string Container::serialize() const {
  nlohmann::json index = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& [name, t] : tensors) {
    index.push_back({{"name", name}, {"shape", t.shape()}, {"offset", offset}});
    offset += static_cast<std::uint64_t>(t.size());
  }
  nlohmann::json header = {
      {"type", type}, {"format_version", kFormatVersion}, {"metadata", metadata}, {"tensors", index}};
  const std::string text = header.dump();

  std::string out(kMagic, sizeof(kMagic));
  append_raw(out, kFormatVersion);
  append_raw(out, static_cast<std::uint64_t>(text.size()));
  out += text;
  for (const auto& [name, t] : tensors) {
    out.append(reinterpret_cast<const char*>(t.data().data()), static_cast<std::size_t>(t.size()) * sizeof(double));
  }
  return out;
}

Container Container::deserialize(std::string_view bytes) {
  if (bytes.size() < sizeof(kMagic) || std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0) {
    throw ParseError("not a stimpute container (bad magic)");
  }
  std::size_t pos = sizeof(kMagic);
  const auto version = read_raw<std::uint32_t>(bytes, pos);
  if (version != kFormatVersion) {
    throw ParseError("unsupported container format version " + std::to_string(version));
  }
  const auto header_len = read_raw<std::uint64_t>(bytes, pos);
  if (pos + header_len > bytes.size()) throw ParseError("container header truncated");
  const nlohmann::json header = nlohmann::json::parse(bytes.substr(pos, header_len));
  pos += header_len;

  Container c;
  c.type = header.at("type").get<std::string>();
  c.metadata = header.at("metadata");
  const std::size_t payload = pos;
  for (const auto& entry : header.at("tensors")) {
    Shape shape = entry.at("shape").get<Shape>();
    const auto offset = entry.at("offset").get<std::uint64_t>();
    const Index n = shape_size(shape);
    const std::size_t begin = payload + offset * sizeof(double);
    if (begin + static_cast<std::size_t>(n) * sizeof(double) > bytes.size()) {
      throw ParseError("container payload truncated at tensor '" + entry.at("name").get<std::string>() + "'");
    }
    Tensor<double>::Vector data(n);
    std::memcpy(data.data(), bytes.data() + begin, static_cast<std::size_t>(n) * sizeof(double));
    c.tensors.emplace(entry.at("name").get<std::string>(), Tensor<double>(std::move(shape), std::move(data)));
  }
  return c;
}

void Container::write(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open '" + path.string() + "' for writing");
  const std::string bytes = serialize();
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("failed writing '" + path.string() + "'");
}

Container Container::read(const std::filesystem::path& path, const std::string& expected_type) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError("cannot open container '" + path.string() + "'");
  std::ostringstream buffer;
  buffer << in.rdbuf();
  Container c = deserialize(buffer.str());
  if (!expected_type.empty() && c.type != expected_type) {
    throw ParseError("container '" + path.string() + "' has type '" + c.type + "', expected '" + expected_type + "'");
  }
  return c;
}

template <typename Scalar>
Container to_container(const Model<Scalar>& model, const nlohmann::json& extra) {
  Container c;
  c.type = "model";
  c.metadata = extra;
  c.metadata["spec"] = to_json(model.spec);
  c.metadata["seed"] = model.seed;
  c.metadata["precision"] = precision_name<Scalar>();
  for (const auto& [name, t] : model.parameters) c.tensors.emplace(name, t.template cast<double>());
  return c;
}

template <typename Scalar>
Model<Scalar> model_from_container(const Container& c) {
  if (c.type != "model") throw ParseError("container type '" + c.type + "' is not a model");
  Model<Scalar> model = build_model<Scalar>(model_spec_from_json(c.metadata.at("spec")),
                                            c.metadata.at("seed").get<std::uint64_t>());
  for (auto& [name, t] : model.parameters) {
    auto it = c.tensors.find(name);
    if (it == c.tensors.end()) throw ParseError("checkpoint is missing parameter '" + name + "'");
    if (it->second.shape() != t.shape()) {
      throw ParseError("checkpoint parameter '" + name + "' has shape " + shape_string(it->second.shape()) +
                       ", expected " + shape_string(t.shape()));
    }
    t = it->second.template cast<Scalar>();
  }
  if (c.tensors.size() != model.parameters.size()) throw ParseError("checkpoint has unexpected extra tensors");
  return model;
}

template Container to_container<float>(const Model<float>&, const nlohmann::json&);
template Container to_container<double>(const Model<double>&, const nlohmann::json&);
template Model<float> model_from_container<float>(const Container&);
template Model<double> model_from_container<double>(const Container&);

}  // namespace stimpute
