#pragma once

#include <sys/mman.h>
#include <unistd.h>

#include <bit>
#include <cerrno>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <span>
#include <string>
#include <utility>

#include "smcguard/error.hpp"

namespace smcguard {

/// OS page size, queried once per process.
inline std::size_t page_size() {
  static const std::size_t size = [] {
    const long v = ::sysconf(_SC_PAGESIZE);
    return v > 0 ? static_cast<std::size_t>(v) : std::size_t{4096};
  }();
  return size;
}

inline std::size_t round_to_pages(std::size_t bytes) {
  const std::size_t ps = page_size();
  return (bytes + ps - 1) / ps * ps;
}

enum class Placement {
  plain,
  /// Surrounded by 2 GiB of inaccessible reservation on each side, so that any
  /// RIP-relative access from inside the region (disp32 reach) either stays inside it or
  /// faults instead of touching unrelated memory.
  fenced,
};

/// Page-aligned read-write-execute mapping. Move-only; unmapped on destruction unless
/// already released.
enum class Access { rwx, rw };

class ExecRegion {
 public:
  ExecRegion() = default;
  ExecRegion(const ExecRegion&) = delete;
  ExecRegion& operator=(const ExecRegion&) = delete;
  ExecRegion(ExecRegion&& o) noexcept { swap(o); }
  ExecRegion& operator=(ExecRegion&& o) noexcept {
    if (this != &o) {
      unmap();
      swap(o);
    }
    return *this;
  }
  ~ExecRegion() { unmap(); }

  std::uint8_t* base() const noexcept { return base_; }
  std::size_t size() const noexcept { return len_; }
  bool live() const noexcept { return base_ != nullptr; }
  bool fenced() const noexcept { return map_base_ != base_; }
  std::span<std::uint8_t> bytes() const noexcept { return {base_, len_}; }

  void release() {
    if (!live()) {
      throw Error(Errc::already_released, "exec region released twice");
    }
    unmap();
  }

 private:
  friend ExecRegion alloc_exec(std::size_t, Placement, Access);

  ExecRegion(void* map_base, std::size_t map_len, std::uint8_t* base, std::size_t len)
      : map_base_(map_base), map_len_(map_len), base_(base), len_(len) {}

  void swap(ExecRegion& o) noexcept {
    std::swap(map_base_, o.map_base_);
    std::swap(map_len_, o.map_len_);
    std::swap(base_, o.base_);
    std::swap(len_, o.len_);
  }

  void unmap() noexcept {
    if (map_base_ != nullptr) {
      ::munmap(map_base_, map_len_);
    }
    map_base_ = nullptr;
    map_len_ = 0;
    base_ = nullptr;
    len_ = 0;
  }

  void* map_base_ = nullptr;
  std::size_t map_len_ = 0;
  std::uint8_t* base_ = nullptr;
  std::size_t len_ = 0;
};

namespace detail {

[[noreturn]] inline void throw_map_error(int err, std::size_t len) {
  if (err == EACCES || err == EPERM) {
    throw Error(Errc::permission_denied,
                "the OS refused a writable+executable mapping (W^X policy such as SELinux "
                "deny_execmem or PaX MPROTECT); allow execmem for this binary or run it "
                "outside the hardened profile");
  }
  throw Error(Errc::out_of_memory, "cannot map " + std::to_string(len) + " bytes: " + std::strerror(err));
}

inline constexpr std::size_t kFenceReach = std::size_t{1} << 31;

}  // namespace detail

/// Zero-filled region of ceil(size / page) pages, read-write-execute unless `access` says
/// otherwise.
inline ExecRegion alloc_exec(std::size_t size, Placement placement = Placement::plain, Access access = Access::rwx) {
  if (size == 0) {
    throw Error(Errc::invalid_argument, "exec region size must be positive");
  }
  const std::size_t len = round_to_pages(size);
  const int prot = access == Access::rwx ? PROT_READ | PROT_WRITE | PROT_EXEC : PROT_READ | PROT_WRITE;

  if (placement == Placement::plain) {
    void* p = ::mmap(nullptr, len, prot, MAP_PRIVATE | MAP_ANONYMOUS, -1, 0);
    if (p == MAP_FAILED) {
      detail::throw_map_error(errno, len);
    }
    return ExecRegion(p, len, static_cast<std::uint8_t*>(p), len);
  }

  const std::size_t map_len = len + 2 * detail::kFenceReach;
  void* p = ::mmap(nullptr, map_len, PROT_NONE, MAP_PRIVATE | MAP_ANONYMOUS | MAP_NORESERVE, -1, 0);
  if (p == MAP_FAILED) {
    detail::throw_map_error(errno, map_len);
  }
  auto* base = static_cast<std::uint8_t*>(p) + detail::kFenceReach;
  if (::mprotect(base, len, prot) != 0) {
    const int err = errno;
    ::munmap(p, map_len);
    detail::throw_map_error(err, len);
  }
  return ExecRegion(p, map_len, base, len);
}

inline void release(ExecRegion& region) { region.release(); }

/// x86-64 keeps instruction fetch coherent with stores from the same core, so this only
/// checks liveness; it exists so the contract is the same on ISAs that need a flush.
inline void sync_icache(const ExecRegion& region) {
  if (!region.live()) {
    throw Error(Errc::already_released, "sync on a released region");
  }
#if !defined(__x86_64__)
  __builtin___clear_cache(reinterpret_cast<char*>(region.base()), reinterpret_cast<char*>(region.base() + region.size()));
#endif
}

}  // namespace smcguard
