#include "skysim/host_cache.hpp"

#include <algorithm>
#include <charconv>
#include <sstream>

namespace skysim {

void HostCache::upsert(const HostCacheEntry& entry)
{
    auto it = std::find_if(entries_.begin(), entries_.end(),
                           [&](const HostCacheEntry& e) { return e.node == entry.node; });
    if (it != entries_.end()) {
        it->last_seen = entry.last_seen;
        return;
    }
    entries_.push_back(entry);
    while (entries_.size() > capacity_) {
        auto oldest = std::min_element(entries_.begin(), entries_.end(),
                                       [](const auto& a, const auto& b) { return a.last_seen < b.last_seen; });
        entries_.erase(oldest);
    }
}

bool HostCache::erase(const SocketAddr& node)
{
    auto it = std::find_if(entries_.begin(), entries_.end(), [&](const HostCacheEntry& e) { return e.node == node; });
    if (it == entries_.end()) return false;
    entries_.erase(it);
    return true;
}

bool HostCache::contains(const SocketAddr& node) const
{
    return std::any_of(entries_.begin(), entries_.end(), [&](const HostCacheEntry& e) { return e.node == node; });
}

std::vector<HostCacheEntry> HostCache::candidates(std::size_t n) const
{
    if (n == 0) throw std::invalid_argument("candidates: n must be >= 1");
    std::vector<HostCacheEntry> sorted = entries_;
    std::stable_sort(sorted.begin(), sorted.end(),
                     [](const auto& a, const auto& b) { return a.last_seen > b.last_seen; });
    if (sorted.size() > n) sorted.resize(n);
    return sorted;
}

std::string snapshot(const HostCache& cache)
{
    std::ostringstream out;
    for (const auto& e : cache.entries()) out << e.node.addr << ' ' << e.node.port << ' ' << e.last_seen.count() << '\n';
    return out.str();
}

namespace {

template <typename T>
bool parse_number(std::string_view s, T& out)
{
    auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
    return ec == std::errc{} && ptr == s.data() + s.size();
}

}  // namespace

HostCache load_host_cache(std::string_view text)
{
    HostCache cache;
    std::istringstream in{std::string(text)};
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        std::istringstream fields(line);
        std::string addr, port_s, seen_s, extra;
        if (!(fields >> addr >> port_s >> seen_s) || (fields >> extra))
            throw HostCacheParseError(lineno, "expected 'addr port last_seen_millis'");
        unsigned long port = 0;
        if (!parse_number(port_s, port) || port < 1 || port > 65535)
            throw HostCacheParseError(lineno, "port '" + port_s + "' out of range 1-65535");
        long long seen = 0;
        if (!parse_number(seen_s, seen) || seen < 0)
            throw HostCacheParseError(lineno, "bad last_seen '" + seen_s + "'");
        SocketAddr node{addr, static_cast<std::uint16_t>(port)};
        if (cache.contains(node)) throw HostCacheParseError(lineno, "duplicate entry " + to_string(node));
        if (cache.size() == cache.capacity()) throw HostCacheParseError(lineno, "more than 200 entries");
        cache.upsert(HostCacheEntry{node, SimTime{seen}});
    }
    return cache;
}

BootstrapList::BootstrapList(std::vector<SocketAddr> nodes)
{
    if (nodes.size() != kSize)
        throw std::invalid_argument("bootstrap requires 7 entries, got " + std::to_string(nodes.size()));
    std::copy(nodes.begin(), nodes.end(), nodes_.begin());
}

}  // namespace skysim
