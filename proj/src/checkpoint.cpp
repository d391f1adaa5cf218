#include "twopass/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <sstream>

#include "twopass/error.hpp"
#include "twopass/io.hpp"

namespace twopass {

static_assert(std::endian::native == std::endian::little,
              "checkpoint blobs are written in host order, which must be little-endian");

namespace {

constexpr std::string_view kMagic = "TWOPASS-CKPT\n";

std::string shape_token(const Shape& s) {
  std::string out;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += 'x';
    out += std::to_string(s[i]);
  }
  return out.empty() ? "scalar" : out;
}

Shape parse_shape(const std::string& token) {
  Shape s;
  if (token == "scalar") return s;
  std::stringstream ss(token);
  std::string part;
  while (std::getline(ss, part, 'x')) s.push_back(std::stoul(part));
  return s;
}

std::size_t dtype_size(const std::string& dtype) {
  if (dtype == "f32") return 4;
  if (dtype == "f64") return 8;
  throw DataError("checkpoint: unknown dtype '" + dtype + "'");
}

void write_blob(std::string& out, const std::string& section, const Blob& b) {
  out += "blob " + section + ":" + b.name + " " + b.dtype + " " + shape_token(b.shape) + " " +
         std::to_string(b.data.size()) + "\n";
  out.append(reinterpret_cast<const char*>(b.data.data()), b.data.size());
}

class Reader {
 public:
  explicit Reader(std::string_view bytes) : bytes_(bytes) {}

  std::string line() {
    const auto end = bytes_.find('\n', pos_);
    if (end == std::string_view::npos) throw DataError("checkpoint: truncated header");
    std::string s(bytes_.substr(pos_, end - pos_));
    pos_ = end + 1;
    return s;
  }

  std::vector<std::byte> take(std::size_t n) {
    if (pos_ + n > bytes_.size()) throw DataError("checkpoint: truncated blob");
    std::vector<std::byte> out(n);
    std::memcpy(out.data(), bytes_.data() + pos_, n);
    pos_ += n;
    return out;
  }

  bool done() const { return pos_ >= bytes_.size(); }

 private:
  std::string_view bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

const std::string& Checkpoint::get(const std::string& key) const {
  auto it = header.find(key);
  if (it == header.end()) throw DataError("checkpoint: missing header key '" + key + "'");
  return it->second;
}

std::uint64_t Checkpoint::get_u64(const std::string& key) const {
  try {
    return std::stoull(get(key));
  } catch (const std::logic_error&) {
    throw DataError("checkpoint: header key '" + key + "' is not an integer");
  }
}

double Checkpoint::get_double(const std::string& key) const {
  try {
    return std::stod(get(key));
  } catch (const std::logic_error&) {
    throw DataError("checkpoint: header key '" + key + "' is not a number");
  }
}

std::string serialize_checkpoint(const Checkpoint& c) {
  std::string out(kMagic);
  out += "format_version=" + std::to_string(kCheckpointVersion) + "\n";
  for (const auto& [k, v] : c.header) {
    if (k == "format_version") continue;
    if (k.find_first_of("=\n") != std::string::npos || v.find('\n') != std::string::npos) {
      throw DataError("checkpoint: header entry '" + k + "' cannot be stored");
    }
    out += k + "=" + v + "\n";
  }
  out += "end\n";
  Blob part{"text", "u8", {c.partition_text.size()}, {}};
  part.data.resize(c.partition_text.size());
  std::memcpy(part.data.data(), c.partition_text.data(), c.partition_text.size());
  out += "blob partition:text u8 " + shape_token(part.shape) + " " +
         std::to_string(part.data.size()) + "\n";
  out.append(c.partition_text);
  for (const auto& b : c.parameters) write_blob(out, "param", b);
  for (const auto& b : c.adam_m) write_blob(out, "adam_m", b);
  for (const auto& b : c.adam_v) write_blob(out, "adam_v", b);
  const std::uint32_t crc = crc32(out);
  char tail[4];
  std::memcpy(tail, &crc, 4);
  out.append(tail, 4);
  return out;
}

Checkpoint parse_checkpoint(std::string_view bytes) {
  if (bytes.size() < kMagic.size() + 4 || bytes.substr(0, kMagic.size()) != kMagic) {
    throw DataError("checkpoint: bad magic (not a checkpoint file)");
  }
  std::uint32_t stored = 0;
  std::memcpy(&stored, bytes.data() + bytes.size() - 4, 4);
  const auto body = bytes.substr(0, bytes.size() - 4);
  if (crc32(body) != stored) throw DataError("checkpoint: CRC mismatch (file is corrupt)");

  Reader r(body.substr(kMagic.size()));
  Checkpoint c;
  for (std::string l = r.line(); l != "end"; l = r.line()) {
    const auto eq = l.find('=');
    if (eq == std::string::npos) throw DataError("checkpoint: malformed header line '" + l + "'");
    c.header[l.substr(0, eq)] = l.substr(eq + 1);
  }
  if (c.get_u64("format_version") != kCheckpointVersion) {
    throw DataError("checkpoint: unsupported format_version " + c.get("format_version"));
  }
  c.header.erase("format_version");
  while (!r.done()) {
    std::istringstream in(r.line());
    std::string tag, qualified, dtype, shape;
    std::size_t n = 0;
    if (!(in >> tag >> qualified >> dtype >> shape >> n) || tag != "blob") {
      throw DataError("checkpoint: malformed blob header");
    }
    const auto colon = qualified.find(':');
    const std::string section = qualified.substr(0, colon);
    Blob b{qualified.substr(colon + 1), dtype, parse_shape(shape), r.take(n)};
    if (section == "partition") {
      c.partition_text.assign(reinterpret_cast<const char*>(b.data.data()), b.data.size());
      continue;
    }
    if (b.data.size() != shape_numel(b.shape) * dtype_size(dtype)) {
      throw DataError("checkpoint: blob " + b.name + " has " + std::to_string(n) +
                      " bytes for shape " + shape);
    }
    if (section == "param") {
      c.parameters.push_back(std::move(b));
    } else if (section == "adam_m") {
      c.adam_m.push_back(std::move(b));
    } else if (section == "adam_v") {
      c.adam_v.push_back(std::move(b));
    } else {
      throw DataError("checkpoint: unknown blob section '" + section + "'");
    }
  }
  return c;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& c) {
  write_atomic(path, serialize_checkpoint(c));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  return parse_checkpoint(read_file(path));
}

template <typename T>
Blob to_blob(const std::string& name, std::span<const T> values, const Shape& shape) {
  Blob b{name, sizeof(T) == 4 ? "f32" : "f64", shape, {}};
  b.data.resize(values.size() * sizeof(T));
  std::memcpy(b.data.data(), values.data(), b.data.size());
  return b;
}

template <typename T>
std::vector<T> from_blob(const Blob& b) {
  const std::size_t n = shape_numel(b.shape);
  std::vector<T> out(n);
  if (b.dtype == "f32") {
    std::vector<float> raw(n);
    std::memcpy(raw.data(), b.data.data(), n * 4);
    std::copy(raw.begin(), raw.end(), out.begin());
  } else if (b.dtype == "f64") {
    std::vector<double> raw(n);
    std::memcpy(raw.data(), b.data.data(), n * 8);
    for (std::size_t i = 0; i < n; ++i) out[i] = static_cast<T>(raw[i]);
  } else {
    throw DataError("checkpoint: blob " + b.name + " has dtype " + b.dtype);
  }
  return out;
}

template <typename T>
Checkpoint make_checkpoint(const LanguageModel<T>& model, const Vocab& vocab) {
  Checkpoint c;
  c.header["model_kind"] = std::string(model.kind());
  std::istringstream cfg(model.config().serialize());
  for (std::string l; std::getline(cfg, l);) {
    const auto eq = l.find('=');
    c.header["model." + l.substr(0, eq)] = l.substr(eq + 1);
  }
  c.header["support"] = std::string(to_string(model.support()));
  c.header["precision"] = sizeof(T) == 4 ? "f32" : "f64";
  c.header["vocab_checksum"] = hex32(vocab.checksum());
  c.header["partition_checksum"] = hex32(model.partition().checksum());
  c.header["version"] = std::string(version_string());
  c.partition_text = model.partition().serialize(vocab);
  for (const auto& p : model.parameters()) {
    c.parameters.push_back(to_blob<T>(p.name, p.tensor.values(), p.tensor.shape()));
  }
  return c;
}

template <typename T>
void restore_parameters(LanguageModel<T>& model, const Checkpoint& c) {
  auto& params = model.parameters();
  if (params.size() != c.parameters.size()) {
    throw DataError("checkpoint: " + std::to_string(c.parameters.size()) +
                    " parameter blobs for a model with " + std::to_string(params.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& b = c.parameters[i];
    if (b.name != params[i].name || b.shape != params[i].tensor.shape()) {
      throw DataError("checkpoint: blob " + b.name + " " + shape_string(b.shape) +
                      " does not match parameter " + params[i].name + " " +
                      shape_string(params[i].tensor.shape()));
    }
    const auto values = from_blob<T>(b);
    std::copy(values.begin(), values.end(), params[i].tensor.values().begin());
  }
}

template <typename T>
std::unique_ptr<LanguageModel<T>> model_from_checkpoint(const Checkpoint& c, const Vocab& vocab) {
  if (c.get("vocab_checksum") != hex32(vocab.checksum())) {
    throw DataError("checkpoint: vocab checksum " + c.get("vocab_checksum") +
                    " does not match the given vocab (" + hex32(vocab.checksum()) + ")");
  }
  const auto partition = VocabPartition::parse(c.partition_text, vocab);
  if (hex32(partition.checksum()) != c.get("partition_checksum")) {
    throw DataError("checkpoint: partition checksum mismatch (stored " +
                    c.get("partition_checksum") + ", recomputed " +
                    hex32(partition.checksum()) + ")");
  }
  std::map<std::string, std::string> kv;
  for (const auto& [k, v] : c.header) {
    if (k.rfind("model.", 0) == 0) kv[k.substr(6)] = v;
  }
  auto model = make_model<T>(c.get("model_kind"), ModelConfig::parse(kv), partition,
                             parse_support_mode(c.get("support")), 0);
  restore_parameters(*model, c);
  return model;
}

std::string describe_checkpoint(const Checkpoint& c) {
  std::ostringstream out;
  for (const auto& [k, v] : c.header) out << k << " = " << v << "\n";
  std::size_t total = 0;
  for (const auto& b : c.parameters) total += shape_numel(b.shape);
  out << "parameters = " << c.parameters.size() << " tensors, " << total << " values\n";
  out << "optimizer_state = " << (c.adam_m.empty() ? "absent" : "present") << "\n";
  for (const auto& b : c.parameters) {
    out << "  " << b.name << " " << b.dtype << " " << shape_string(b.shape) << "\n";
  }
  return out.str();
}

template Blob to_blob<float>(const std::string&, std::span<const float>, const Shape&);
template Blob to_blob<double>(const std::string&, std::span<const double>, const Shape&);
template std::vector<float> from_blob<float>(const Blob&);
template std::vector<double> from_blob<double>(const Blob&);
template Checkpoint make_checkpoint<float>(const LanguageModel<float>&, const Vocab&);
template Checkpoint make_checkpoint<double>(const LanguageModel<double>&, const Vocab&);
template void restore_parameters<float>(LanguageModel<float>&, const Checkpoint&);
template void restore_parameters<double>(LanguageModel<double>&, const Checkpoint&);
template std::unique_ptr<LanguageModel<float>> model_from_checkpoint<float>(const Checkpoint&,
                                                                            const Vocab&);
template std::unique_ptr<LanguageModel<double>> model_from_checkpoint<double>(const Checkpoint&,
                                                                              const Vocab&);

}  // namespace twopass
