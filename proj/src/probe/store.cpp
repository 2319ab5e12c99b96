#include <fcntl.h>
#include <sys/file.h>
#include <unistd.h>

#include <cerrno>
#include <cstring>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "cfaudit/probe/probe.hpp"

namespace cfaudit::probe {

namespace fs = std::filesystem;

namespace {

std::string key_of(const std::string& backend_id, const std::string& digest) {
  return backend_id + '\x1f' + digest;
}

void write_all(int fd, std::string_view data, const fs::path& path) {
  while (!data.empty()) {
    const ssize_t n = ::write(fd, data.data(), data.size());
    if (n < 0) {
      if (errno == EINTR) continue;
      throw DataError("write to " + path.string() + " failed: " + std::strerror(errno));
    }
    data.remove_prefix(static_cast<std::size_t>(n));
  }
}

std::string slurp(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) return {};
  std::stringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

}  // namespace

fs::path ProbeStore::index_path(const fs::path& path) {
  fs::path p = path;
  p += ".idx";
  return p;
}

ProbeStore ProbeStore::open(const fs::path& path, Options options) {
  ProbeStore store;
  store.path_ = path;
  store.options_ = options;

  if (options.read_only) {
    if (!fs::exists(path)) throw ConfigError("probe store " + path.string() + " does not exist");
  } else {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    fs::path lock = path;
    lock += ".lock";
    store.lock_fd_ = ::open(lock.c_str(), O_RDWR | O_CREAT | O_CLOEXEC, 0644);
    if (store.lock_fd_ < 0) throw ConfigError("cannot create lock file " + lock.string());
    if (::flock(store.lock_fd_, LOCK_EX | LOCK_NB) != 0) {
      throw ConfigError("probe store " + path.string() + " is locked by another writer");
    }
  }

  const std::string text = slurp(path);
  std::size_t good_end = 0;
  std::size_t pos = 0;
  std::vector<std::size_t> offsets;
  while (pos < text.size()) {
    const std::size_t nl = text.find('\n', pos);
    if (nl == std::string::npos) break;  // torn final line
    const std::string_view line(text.data() + pos, nl - pos);
    if (!line.empty()) {
      ProbeRecord rec;
      try {
        rec = record_from_json_line(line);
      } catch (const nlohmann::json::exception& e) {
        throw DataError("corrupt probe store line at byte " + std::to_string(pos) + " of " +
                        path.string() + ": " + e.what());
      }
      const std::string key = key_of(rec.backend_id, rec.image_id);
      if (!store.index_.contains(key)) {
        store.index_.emplace(key, store.log_.size());
        store.log_.push_back(std::move(rec));
        offsets.push_back(pos);
      }
    }
    pos = nl + 1;
    good_end = pos;
  }
  store.dropped_tail_ = text.size() - good_end;

  if (options.read_only) return store;

  if (store.dropped_tail_ > 0) fs::resize_file(path, good_end);
  store.fd_ = ::open(path.c_str(), O_WRONLY | O_CREAT | O_APPEND | O_CLOEXEC, 0644);
  if (store.fd_ < 0) throw ConfigError("cannot open probe store " + path.string());

  // The index is derived data; rebuild it from the log on every open.
  std::string index;
  for (std::size_t i = 0; i < store.log_.size(); ++i) {
    const auto& rec = store.log_[i];
    index += rec.backend_id + '\t' + rec.image_id + '\t' + std::to_string(offsets[i]) + '\n';
  }
  const fs::path idx = index_path(path);
  fs::path tmp = idx;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    out << index;
    if (!out) throw DataError("cannot write " + tmp.string());
  }
  fs::rename(tmp, idx);
  store.index_fd_ = ::open(idx.c_str(), O_WRONLY | O_APPEND | O_CLOEXEC);
  if (store.index_fd_ < 0) throw DataError("cannot open " + idx.string());
  return store;
}

ProbeStore::ProbeStore(ProbeStore&& other) noexcept
    : path_(std::move(other.path_)),
      options_(other.options_),
      fd_(std::exchange(other.fd_, -1)),
      lock_fd_(std::exchange(other.lock_fd_, -1)),
      index_fd_(std::exchange(other.index_fd_, -1)),
      dropped_tail_(other.dropped_tail_),
      log_(std::move(other.log_)),
      index_(std::move(other.index_)),
      mu_(std::move(other.mu_)) {}

ProbeStore::~ProbeStore() {
  if (fd_ >= 0) ::close(fd_);
  if (index_fd_ >= 0) ::close(index_fd_);
  if (lock_fd_ >= 0) ::close(lock_fd_);  // releases the flock
}

std::optional<ProbeRecord> ProbeStore::find(const std::string& backend_id,
                                            const std::string& digest) const {
  std::lock_guard lock(*mu_);
  auto it = index_.find(key_of(backend_id, digest));
  if (it == index_.end()) return std::nullopt;
  return log_[it->second];
}

ProbeRecord ProbeStore::append(const ProbeRecord& record) {
  if (options_.read_only) throw ArgumentError("probe store opened read-only");
  std::lock_guard lock(*mu_);
  const std::string key = key_of(record.backend_id, record.image_id);
  if (auto it = index_.find(key); it != index_.end()) return log_[it->second];

  const std::string line = record_to_json_line(record) + '\n';
  const off_t offset = ::lseek(fd_, 0, SEEK_END);
  write_all(fd_, line, path_);
  if (options_.fsync && ::fsync(fd_) != 0) {
    throw DataError("fsync of " + path_.string() + " failed: " + std::strerror(errno));
  }
  write_all(index_fd_,
            record.backend_id + '\t' + record.image_id + '\t' + std::to_string(offset) + '\n',
            index_path(path_));

  ProbeRecord stored = record;
  stored.from_cache = false;
  index_.emplace(key, log_.size());
  log_.push_back(stored);
  return stored;
}

std::size_t ProbeStore::size() const {
  std::lock_guard lock(*mu_);
  return log_.size();
}

std::vector<ProbeRecord> ProbeStore::records() const {
  std::lock_guard lock(*mu_);
  return log_;
}

}  // namespace cfaudit::probe
