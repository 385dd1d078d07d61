#pragma once

#include "skysim/net_types.hpp"
#include "skysim/simnet.hpp"

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>

namespace skysim {

struct CodecSpec {
    double passband_low_hz = 50.0;
    double passband_high_hz = 8000.0;
    std::uint32_t frame_payload_udp = 67;
    std::uint32_t frame_payload_tcp = 69;
    std::uint32_t frames_per_second = 70;  // per direction
    // Mixed frames a conference host sends to each member.
    std::uint32_t mixer_frame_payload_udp = 67;
    std::uint32_t mixer_frames_per_second = 70;

    std::uint32_t payload(Transport t) const { return t == Transport::Udp ? frame_payload_udp : frame_payload_tcp; }
    std::uint32_t mixer_payload(Transport t) const
    {
        return t == Transport::Udp ? mixer_frame_payload_udp : mixer_frame_payload_udp + (frame_payload_tcp - frame_payload_udp);
    }
};

// 67-byte frames at 70 per second each way.
CodecSpec default_codec();

// 18 kb/s per stream (45-byte frames at 50/s) with mixed frames at half
// rate, which yields the 36 kb/s two-way and 54 kb/s conference-host figures.
CodecSpec calibration_profile();

// Throws std::invalid_argument for non-positive frequencies.
bool passband_audible(double freq_hz, const CodecSpec& codec = default_codec());

enum class Grade : std::uint8_t { Good, Degraded, Unintelligible };

std::string_view to_string(Grade g);

inline constexpr double kGoodRate = 2000.0;
inline constexpr double kUnintelligibleRate = 1500.0;

Grade grade_for(double bytes_per_second);

struct QualityReport {
    double achieved_rate = 0.0;  // payload bytes/s
    Grade grade = Grade::Unintelligible;
};

// Offset of the k-th frame after stream start, rounded down to whole ms.
Duration frame_offset(std::uint64_t k, std::uint32_t frames_per_second);

// One direction of a voice stream.
struct MediaStream {
    std::string label;  // session or conference id
    NodeId from;
    NodeId to;
    Transport transport = Transport::Udp;
    std::uint64_t sent_frames = 0;
    std::uint64_t delivered_frames = 0;
    std::uint64_t delivered_bytes = 0;
    std::uint64_t sent_bytes = 0;
    // Delivered payload keyed by the second the frame was emitted.
    std::map<std::int64_t, std::uint64_t> delivered_by_second;
    SimTime active_since{0};
    Duration active_time{0};  // accumulated over Active periods

    void on_sent(std::uint32_t bytes)
    {
        ++sent_frames;
        sent_bytes += bytes;
    }
    void on_delivered(SimTime emitted_at, std::uint32_t bytes);
    // Payload emitted in [from, from + window) that reached the far end.
    std::uint64_t delivered_in(SimTime from, Duration window) const;
};

// Throws std::invalid_argument for windows shorter than one second.
QualityReport quality(const MediaStream& stream, SimTime from, Duration window);

// Emits `tick(k)` at start + frame_offset(k) until stopped.
class FramePacer {
public:
    FramePacer() = default;
    FramePacer(const FramePacer&) = delete;
    FramePacer& operator=(const FramePacer&) = delete;
    ~FramePacer() { stop(); }

    void start(Scheduler& sched, SimTime start, std::uint32_t per_second, std::function<void(std::uint64_t)> tick);
    void stop();
    bool running() const { return sched_ != nullptr; }

private:
    void arm();

    Scheduler* sched_ = nullptr;
    SimTime start_{0};
    std::uint32_t per_second_ = 0;
    std::uint64_t next_k_ = 0;
    std::optional<EventId> pending_;
    std::function<void(std::uint64_t)> tick_;
};

}  // namespace skysim
