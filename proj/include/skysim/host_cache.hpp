#pragma once

#include "skysim/net_types.hpp"

#include <array>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace skysim {

struct HostCacheEntry {
    SocketAddr node;
    SimTime last_seen{0};

    bool operator==(const HostCacheEntry&) const = default;
};

// Bounded list of super-node candidates. Insertion order is kept; when the
// cache overflows the entry with the oldest last_seen goes first (earliest
// position breaks ties).
class HostCache {
public:
    static constexpr std::size_t kCapacity = 200;

    HostCache() = default;
    explicit HostCache(std::size_t capacity) : capacity_(capacity) {}

    void upsert(const HostCacheEntry& entry);
    bool erase(const SocketAddr& node);

    // Up to n entries, most recent last_seen first; ties keep cache order.
    // Throws std::invalid_argument when n == 0.
    std::vector<HostCacheEntry> candidates(std::size_t n) const;

    const std::vector<HostCacheEntry>& entries() const { return entries_; }
    std::size_t size() const { return entries_.size(); }
    bool empty() const { return entries_.empty(); }
    std::size_t capacity() const { return capacity_; }
    bool contains(const SocketAddr& node) const;

    bool operator==(const HostCache&) const = default;

private:
    std::vector<HostCacheEntry> entries_;
    std::size_t capacity_ = kCapacity;
};

// One `addr port last_seen_millis` line per entry.
std::string snapshot(const HostCache& cache);

struct HostCacheParseError : std::runtime_error {
    HostCacheParseError(int line, const std::string& what)
        : std::runtime_error("host cache line " + std::to_string(line) + ": " + what), line(line) {}
    int line;
};

HostCache load_host_cache(std::string_view text);

// The seven well-known super nodes used on the very first login.
class BootstrapList {
public:
    static constexpr std::size_t kSize = 7;

    // Throws std::invalid_argument unless exactly seven entries are given.
    explicit BootstrapList(std::vector<SocketAddr> nodes);

    const std::array<SocketAddr, kSize>& nodes() const { return nodes_; }

private:
    std::array<SocketAddr, kSize> nodes_;
};

}  // namespace skysim
