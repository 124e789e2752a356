#include "fednl/data.h"

#include <fcntl.h>
#include <sys/mman.h>
#include <sys/stat.h>
#include <unistd.h>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <numeric>
#include <set>
#include <stdexcept>

#include "fednl/errors.h"
#include "fednl/prg.h"

namespace fednl {

namespace {

bool is_space(char c) { return c == ' ' || c == '\t' || c == '\r' || c == '\v' || c == '\f'; }

class LineParser {
 public:
  LineParser(std::string_view line, std::size_t line_no) : line_(line), line_no_(line_no) {}

  void skip_space() {
    while (pos_ < line_.size() && is_space(line_[pos_])) ++pos_;
  }
  bool done() {
    skip_space();
    return pos_ >= line_.size() || line_[pos_] == '#';
  }
  [[noreturn]] void fail(const std::string& what) const {
    throw ParseError(line_no_, pos_ + 1, what);
  }

  double number() {
    std::size_t start = pos_;
    if (pos_ < line_.size() && line_[pos_] == '+') ++start;
    double v = 0.0;
    const char* first = line_.data() + start;
    const char* last = line_.data() + line_.size();
    auto [ptr, ec] = std::from_chars(first, last, v);
    if (ec != std::errc() || ptr == first) fail("expected a number");
    pos_ = static_cast<std::size_t>(ptr - line_.data());
    if (!std::isfinite(v)) fail("non-finite value");
    return v;
  }

  std::int64_t integer() {
    std::int64_t v = 0;
    const char* first = line_.data() + pos_;
    const char* last = line_.data() + line_.size();
    auto [ptr, ec] = std::from_chars(first, last, v);
    if (ec != std::errc() || ptr == first) fail("expected a feature index");
    pos_ = static_cast<std::size_t>(ptr - line_.data());
    return v;
  }

  void expect(char c) {
    if (pos_ >= line_.size() || line_[pos_] != c) fail(std::string("expected '") + c + "'");
    ++pos_;
  }

  void expect_separator() {
    if (pos_ < line_.size() && !is_space(line_[pos_]) && line_[pos_] != '#') {
      fail("unexpected character");
    }
  }

  std::size_t column() const { return pos_ + 1; }

 private:
  std::string_view line_;
  std::size_t line_no_;
  std::size_t pos_ = 0;
};

// Read-only memory mapping of a whole file.
class MappedFile {
 public:
  explicit MappedFile(const std::filesystem::path& path) {
    fd_ = ::open(path.c_str(), O_RDONLY);
    if (fd_ < 0) throw ConfigError("cannot open " + path.string() + ": " + std::strerror(errno));
    struct stat st {};
    if (::fstat(fd_, &st) != 0) {
      ::close(fd_);
      throw ConfigError("cannot stat " + path.string());
    }
    size_ = static_cast<std::size_t>(st.st_size);
    if (size_ > 0) {
      void* p = ::mmap(nullptr, size_, PROT_READ, MAP_PRIVATE, fd_, 0);
      if (p == MAP_FAILED) {
        ::close(fd_);
        throw ConfigError("cannot map " + path.string());
      }
      data_ = static_cast<const char*>(p);
    }
  }
  ~MappedFile() {
    if (data_) ::munmap(const_cast<char*>(data_), size_);
    if (fd_ >= 0) ::close(fd_);
  }
  MappedFile(const MappedFile&) = delete;
  MappedFile& operator=(const MappedFile&) = delete;

  std::string_view view() const { return {data_ ? data_ : "", size_}; }

 private:
  int fd_ = -1;
  const char* data_ = nullptr;
  std::size_t size_ = 0;
};

std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

std::vector<double> RawDataset::dense_row(std::size_t r) const {
  std::vector<double> out(d_raw, 0.0);
  for (const auto& e : rows.at(r)) out[e.index - 1] = e.value;
  return out;
}

RawDataset parse_libsvm(std::string_view bytes) {
  RawDataset ds;
  std::set<double> distinct;
  std::size_t line_no = 0;
  std::size_t begin = 0;
  while (begin < bytes.size()) {
    std::size_t end = bytes.find('\n', begin);
    if (end == std::string_view::npos) end = bytes.size();
    const std::string_view line = bytes.substr(begin, end - begin);
    begin = end + 1;
    ++line_no;

    LineParser p(line, line_no);
    if (p.done()) continue;

    const double label = p.number();
    p.expect_separator();
    distinct.insert(label);
    if (distinct.size() > 2) p.fail("more than two distinct labels");

    std::vector<SparseEntry> row;
    while (!p.done()) {
      const std::size_t col = p.column();
      const std::int64_t index = p.integer();
      if (index <= 0) throw ParseError(line_no, col, "feature index must be >= 1");
      if (index > std::int64_t{0xFFFFFFFF}) throw ParseError(line_no, col, "feature index too large");
      if (!row.empty() && static_cast<std::uint32_t>(index) <= row.back().index) {
        throw ParseError(line_no, col, "feature indices must be strictly increasing");
      }
      p.expect(':');
      const double value = p.number();
      p.expect_separator();
      row.push_back({static_cast<std::uint32_t>(index), value});
      ds.d_raw = std::max<std::size_t>(ds.d_raw, static_cast<std::size_t>(index));
    }
    ds.rows.push_back(std::move(row));
    ds.labels.push_back(label);
  }
  return ds;
}

RawDataset load_libsvm(const std::filesystem::path& path) {
  MappedFile file(path);
  return parse_libsvm(file.view());
}

std::string to_libsvm(const RawDataset& ds) {
  std::string out;
  for (std::size_t r = 0; r < ds.size(); ++r) {
    out += format_double(ds.labels[r]);
    for (const auto& e : ds.rows[r]) {
      out += ' ';
      out += std::to_string(e.index);
      out += ':';
      out += format_double(e.value);
    }
    out += '\n';
  }
  return out;
}

void save_libsvm(const RawDataset& ds, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw ConfigError("cannot write " + path.string());
  const std::string text = to_libsvm(ds);
  os.write(text.data(), static_cast<std::streamsize>(text.size()));
  if (!os) throw ConfigError("write failed: " + path.string());
}

LabelMapping normalize_labels(RawDataset& ds) {
  const std::set<double> distinct(ds.labels.begin(), ds.labels.end());
  if (distinct.size() != 2) {
    throw ConfigError("expected exactly two distinct labels, found " +
                      std::to_string(distinct.size()));
  }
  LabelMapping map{*distinct.begin(), *distinct.rbegin(), false};
  const bool standard = map.negative == -1.0 && map.positive == 1.0;
  const bool binary = map.negative == 0.0 && map.positive == 1.0;
  map.notice = !standard && !binary;
  for (double& y : ds.labels) y = (y == map.negative) ? -1.0 : 1.0;
  return map;
}

ShardPlan plan_shards(std::size_t m, std::uint32_t clients, std::uint64_t seed) {
  if (clients == 0) throw ConfigError("at least one client is required");
  if (m < clients) {
    throw ConfigError("dataset has " + std::to_string(m) + " samples for " +
                      std::to_string(clients) + " clients");
  }
  ShardPlan plan;
  plan.clients = clients;
  plan.per_client = m / clients;
  plan.dropped = m - plan.per_client * clients;
  plan.permutation.resize(m);
  std::iota(plan.permutation.begin(), plan.permutation.end(), std::size_t{0});
  Prg prg(round_seed(seed, kShuffleStreamTag, 0));
  for (std::size_t i = m; i-- > 1;) {
    const auto j = static_cast<std::size_t>(prg.uniform_below(i + 1));
    std::swap(plan.permutation[i], plan.permutation[j]);
  }
  return plan;
}

namespace {

void check_signed_labels(const RawDataset& ds) {
  for (double y : ds.labels) {
    if (y != 1.0 && y != -1.0) throw ConfigError("labels must be normalised to -1/+1");
  }
}

void fill_column(const RawDataset& ds, std::size_t r, std::span<double> col) {
  const double y = ds.labels[r];
  for (const auto& e : ds.rows[r]) col[e.index - 1] = y * e.value;
  col[col.size() - 1] = y;
}

}  // namespace

std::shared_ptr<const ClientShard> make_shard(const RawDataset& ds, double lambda,
                                              std::size_t dim) {
  check_signed_labels(ds);
  if (dim == 0) dim = ds.d_raw + 1;
  if (dim < ds.d_raw + 1) {
    throw ConfigError("shard uses feature " + std::to_string(ds.d_raw) + " but d is " +
                      std::to_string(dim));
  }
  if (ds.size() == 0) throw ConfigError("shard has no samples");
  DenseMatrix design(dim, ds.size());
  for (std::size_t j = 0; j < ds.size(); ++j) fill_column(ds, j, design.col(j));
  return std::make_shared<const ClientShard>(std::move(design), lambda);
}

std::vector<std::shared_ptr<const ClientShard>> augment_and_shard(const RawDataset& ds,
                                                                  std::uint32_t clients,
                                                                  std::uint64_t seed,
                                                                  double lambda) {
  check_signed_labels(ds);
  const ShardPlan plan = plan_shards(ds.size(), clients, seed);
  const std::size_t d = ds.d_raw + 1;

  std::vector<std::shared_ptr<const ClientShard>> shards;
  shards.reserve(clients);
  for (std::uint32_t c = 0; c < clients; ++c) {
    DenseMatrix design(d, plan.per_client);
    for (std::size_t j = 0; j < plan.per_client; ++j) {
      fill_column(ds, plan.permutation[c * plan.per_client + j], design.col(j));
    }
    shards.push_back(std::make_shared<const ClientShard>(std::move(design), lambda));
  }
  return shards;
}

std::vector<RawDataset> split_dataset(const RawDataset& ds, std::uint32_t clients,
                                      std::uint64_t seed) {
  const ShardPlan plan = plan_shards(ds.size(), clients, seed);
  std::vector<RawDataset> out(clients);
  for (std::uint32_t c = 0; c < clients; ++c) {
    RawDataset& part = out[c];
    part.d_raw = ds.d_raw;
    for (std::size_t j = 0; j < plan.per_client; ++j) {
      const std::size_t r = plan.permutation[c * plan.per_client + j];
      part.rows.push_back(ds.rows[r]);
      part.labels.push_back(ds.labels[r]);
    }
  }
  return out;
}

RawDataset generate_synthetic(std::size_t d, std::size_t m, std::uint64_t seed,
                              double margin_scale) {
  if (d == 0 || m == 0) throw ConfigError("synthetic dataset needs d >= 1 and m >= 1");
  Prg prg(round_seed(seed, kSyntheticStreamTag, 0));
  auto uniform_pm1 = [&] { return 2.0 * prg.uniform01() - 1.0; };
  auto gaussian = [&] {
    // Box-Muller; 1 - u keeps the log argument in (0, 1].
    const double u1 = 1.0 - prg.uniform01();
    const double u2 = prg.uniform01();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  };

  std::vector<double> truth(d);
  for (double& v : truth) v = uniform_pm1();

  RawDataset ds;
  ds.d_raw = d;
  ds.rows.reserve(m);
  ds.labels.reserve(m);
  for (std::size_t r = 0; r < m; ++r) {
    std::vector<SparseEntry> row(d);
    double margin = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
      const double a = uniform_pm1();
      row[i] = {static_cast<std::uint32_t>(i + 1), a};
      margin += a * truth[i];
    }
    ds.labels.push_back(margin_scale * margin + gaussian() >= 0.0 ? 1.0 : -1.0);
    ds.rows.push_back(std::move(row));
  }
  return ds;
}

}  // namespace fednl
