#include "stylexlab/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <sstream>

#include "stylexlab/hash.hpp"

namespace stylexlab::ckpt {
namespace {

constexpr char kMagic[4] = {'S', 'X', 'L', 'B'};

template <typename U>
void put(std::string& out, U v) {
  out.append(reinterpret_cast<const char*>(&v), sizeof v);
}

void put_str(std::string& out, const std::string& s) {
  put<std::uint32_t>(out, static_cast<std::uint32_t>(s.size()));
  out += s;
}

struct Reader {
  const std::string& buf;
  std::size_t pos = 0;

  void need(std::size_t n) const {
    if (pos + n > buf.size()) throw CorruptError("checkpoint truncated");
  }
  template <typename U>
  U get() {
    need(sizeof(U));
    U v;
    std::memcpy(&v, buf.data() + pos, sizeof v);
    pos += sizeof v;
    return v;
  }
  std::string get_str() {
    const auto n = get<std::uint32_t>();
    need(n);
    std::string s = buf.substr(pos, n);
    pos += n;
    return s;
  }
};

}  // namespace

void write_text(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + tmp.string());
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    if (!out) throw std::runtime_error("write failed: " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

std::string write_blob(const std::filesystem::path& path, const std::string& kind,
                       const nn::ParamList<float>& params) {
  std::string buf(kMagic, 4);
  put<std::uint32_t>(buf, kFormatVersion);
  put_str(buf, kind);
  put<std::uint32_t>(buf, static_cast<std::uint32_t>(params.size()));
  for (const auto* p : params) {
    put_str(buf, p->name);
    put<std::uint64_t>(buf, p->size());
    buf.append(reinterpret_cast<const char*>(p->value.data()), p->size() * sizeof(float));
  }
  Sha256 h;
  h.update(buf);
  std::uint8_t d[32];
  h.digest(d);
  buf.append(reinterpret_cast<const char*>(d), 32);
  write_text(path, buf);
  return sha256_hex(buf);
}

Blob read_blob(const std::filesystem::path& path, const std::string& expected_kind) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  const std::string buf = ss.str();
  if (buf.size() < 4 + 4 + 32 || std::memcmp(buf.data(), kMagic, 4) != 0)
    throw CorruptError("not a checkpoint file: " + path.string());
  Reader r{buf, 4};
  const auto version = r.get<std::uint32_t>();
  if (version != kFormatVersion)
    throw VersionError("checkpoint format version " + std::to_string(version) + ", expected " +
                       std::to_string(kFormatVersion));
  Sha256 h;
  h.update(buf.data(), buf.size() - 32);
  std::uint8_t d[32];
  h.digest(d);
  if (std::memcmp(d, buf.data() + buf.size() - 32, 32) != 0)
    throw CorruptError("checkpoint checksum mismatch: " + path.string());

  const std::string body = buf.substr(0, buf.size() - 32);
  Reader b{body, r.pos};
  Blob blob;
  blob.kind = b.get_str();
  if (blob.kind != expected_kind)
    throw CorruptError("checkpoint holds '" + blob.kind + "', expected '" + expected_kind + "'");
  const auto n = b.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < n; ++i) {
    std::string name = b.get_str();
    const auto count = b.get<std::uint64_t>();
    b.need(count * sizeof(float));
    std::vector<float> values(count);
    std::memcpy(values.data(), body.data() + b.pos, count * sizeof(float));
    b.pos += count * sizeof(float);
    blob.blocks.emplace(std::move(name), std::move(values));
  }
  if (b.pos != body.size()) throw CorruptError("trailing bytes in checkpoint");
  return blob;
}

void load_params(const Blob& blob, const nn::ParamList<float>& params) {
  for (auto* p : params) {
    auto it = blob.blocks.find(p->name);
    if (it == blob.blocks.end()) throw CorruptError("checkpoint lacks parameter " + p->name);
    if (it->second.size() != p->size())
      throw CorruptError("size mismatch for parameter " + p->name);
    p->value = it->second;
  }
}

}  // namespace stylexlab::ckpt
