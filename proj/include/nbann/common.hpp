#pragma once

#include <algorithm>
#include <cstdint>
#include <exception>
#include <stdexcept>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

namespace nbann {

using ImageId = std::int64_t;
using TermId = std::uint32_t;
using LabelId = std::uint32_t;

/// Input that does not conform to a documented format or invariant.
class ValidationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Failure while executing a well-formed request.
class RuntimeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class MetadataKind { kTags = 0, kSets = 1, kGroups = 2 };

inline constexpr MetadataKind kAllKinds[] = {MetadataKind::kTags, MetadataKind::kSets,
                                             MetadataKind::kGroups};

inline std::string_view kind_name(MetadataKind kind) {
  switch (kind) {
    case MetadataKind::kTags:
      return "tags";
    case MetadataKind::kSets:
      return "sets";
    case MetadataKind::kGroups:
      return "groups";
  }
  return "?";
}

inline MetadataKind parse_kind(std::string_view name) {
  if (name == "tags") return MetadataKind::kTags;
  if (name == "sets") return MetadataKind::kSets;
  if (name == "groups") return MetadataKind::kGroups;
  throw ValidationError("unknown metadata kind '" + std::string(name) + "'");
}

// splitmix64 finalizer; used to derive independent per-item seeds.
inline std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

template <typename... Ts>
std::uint64_t derive_seed(std::uint64_t seed, Ts... parts) {
  std::uint64_t h = mix64(seed);
  ((h = mix64(h ^ static_cast<std::uint64_t>(parts))), ...);
  return h;
}

/// FNV-1a, 64 bit.
inline std::uint64_t fnv1a(std::string_view bytes, std::uint64_t h = 0xcbf29ce484222325ULL) {
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  static constexpr char kDigits[] = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i, v >>= 4) out[static_cast<std::size_t>(i)] = kDigits[v & 0xf];
  return out;
}

inline std::size_t default_threads() {
  return std::max<std::size_t>(1, std::thread::hardware_concurrency());
}

/// Runs fn(i) for i in [0, n) over contiguous chunks. fn must only write to
/// per-index outputs so the result is independent of the thread count.
template <typename Fn>
void parallel_for(std::size_t n, std::size_t threads, Fn&& fn) {
  threads = std::min(std::max<std::size_t>(threads, 1), n);
  if (threads <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> workers;
  std::vector<std::exception_ptr> errors(threads);
  workers.reserve(threads);
  const std::size_t chunk = (n + threads - 1) / threads;
  for (std::size_t t = 0; t < threads; ++t) {
    const std::size_t begin = t * chunk;
    const std::size_t end = std::min(n, begin + chunk);
    if (begin >= end) break;
    workers.emplace_back([begin, end, &fn, &err = errors[t]] {
      try {
        for (std::size_t i = begin; i < end; ++i) fn(i);
      } catch (...) {
        err = std::current_exception();
      }
    });
  }
  for (auto& w : workers) w.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

}  // namespace nbann
