#include "dfams/container.hpp"

#include "dfams/common.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

namespace dfams {

static_assert(std::endian::native == std::endian::little, "container IO assumes a little-endian host");

namespace {

constexpr char kMagic[8] = {'D', 'F', 'A', 'M', 'S', 'C', 'K', '\0'};

template <typename T>
void put(std::string& out, const T& v) {
  out.append(reinterpret_cast<const char*>(&v), sizeof(T));
}

void put_string(std::string& out, const std::string& s) {
  put<std::uint64_t>(out, s.size());
  out.append(s);
}

class Reader {
 public:
  explicit Reader(const std::string& bytes, std::size_t end) : bytes_(bytes), end_(end) {}

  template <typename T>
  T get() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }

  std::string get_string() {
    auto n = get<std::uint64_t>();
    need(n);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  void get_doubles(std::vector<double>& out, std::size_t n) {
    need(n * sizeof(double));
    out.resize(n);
    std::memcpy(out.data(), bytes_.data() + pos_, n * sizeof(double));
    pos_ += n * sizeof(double);
  }

  std::size_t pos() const { return pos_; }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > end_) fail(ErrorKind::io, "truncated container");
  }
  const std::string& bytes_;
  std::size_t end_;
  std::size_t pos_ = 0;
};

}  // namespace

const NamedTensor& Container::tensor(const std::string& name) const {
  for (const auto& t : tensors)
    if (t.name == name) return t;
  fail(ErrorKind::io, "container of kind '" + kind + "' has no tensor '" + name + "'");
}

std::string serialize(const Container& c) {
  std::string out(kMagic, sizeof(kMagic));
  put<std::uint32_t>(out, c.format_version);
  put_string(out, c.kind);
  put_string(out, c.meta.dump());
  put<std::uint64_t>(out, c.tensors.size());
  for (const auto& t : c.tensors) {
    std::uint64_t n = 1;
    for (auto d : t.shape) n *= d;
    if (n != t.data.size()) fail(ErrorKind::input, "tensor '" + t.name + "' shape does not match data");
    put_string(out, t.name);
    put<std::uint64_t>(out, t.shape.size());
    for (auto d : t.shape) put<std::uint64_t>(out, d);
    out.append(reinterpret_cast<const char*>(t.data.data()), t.data.size() * sizeof(double));
  }
  Fnv1a h;
  h.update(out.data(), out.size());
  put<std::uint64_t>(out, h.digest());
  return out;
}

Container deserialize(const std::string& bytes) {
  if (bytes.size() < sizeof(kMagic) + sizeof(std::uint64_t) ||
      std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0)
    fail(ErrorKind::io, "not a DFAMS container");
  const std::size_t body = bytes.size() - sizeof(std::uint64_t);
  Fnv1a h;
  h.update(bytes.data(), body);
  std::uint64_t stored;
  std::memcpy(&stored, bytes.data() + body, sizeof(stored));
  if (stored != h.digest()) fail(ErrorKind::io, "container checksum mismatch");

  Reader r(bytes, body);
  for (std::size_t i = 0; i < sizeof(kMagic); ++i) r.get<char>();
  Container c;
  c.format_version = r.get<std::uint32_t>();
  if (c.format_version != Container::kFormatVersion)
    fail(ErrorKind::io, "unsupported container version " + std::to_string(c.format_version));
  c.kind = r.get_string();
  c.meta = nlohmann::json::parse(r.get_string());
  auto count = r.get<std::uint64_t>();
  c.tensors.resize(count);
  for (auto& t : c.tensors) {
    t.name = r.get_string();
    auto ndim = r.get<std::uint64_t>();
    t.shape.resize(ndim);
    std::uint64_t n = 1;
    for (auto& d : t.shape) {
      d = r.get<std::uint64_t>();
      n *= d;
    }
    r.get_doubles(t.data, n);
  }
  if (r.pos() != body) fail(ErrorKind::io, "trailing bytes in container");
  return c;
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::io, "cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const std::filesystem::path& path, const std::string& content) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorKind::io, "cannot write " + path.string());
  out.write(content.data(), static_cast<std::streamsize>(content.size()));
  if (!out) fail(ErrorKind::io, "write failed for " + path.string());
}

void save_container(const Container& c, const std::filesystem::path& path) {
  write_file(path, serialize(c));
}

Container load_container(const std::filesystem::path& path, const std::string& expected_kind) {
  Container c = deserialize(read_file(path));
  if (c.kind != expected_kind)
    fail(ErrorKind::compatibility,
         path.string() + " holds a '" + c.kind + "' artifact, expected '" + expected_kind + "'");
  return c;
}

}  // namespace dfams
