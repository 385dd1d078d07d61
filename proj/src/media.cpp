#include "skysim/media.hpp"

#include <stdexcept>

namespace skysim {

CodecSpec default_codec() { return CodecSpec{}; }

CodecSpec calibration_profile()
{
    CodecSpec c;
    c.frame_payload_udp = 45;
    c.frame_payload_tcp = 47;
    c.frames_per_second = 50;
    c.mixer_frame_payload_udp = 45;
    c.mixer_frames_per_second = 25;
    return c;
}

bool passband_audible(double freq_hz, const CodecSpec& codec)
{
    if (!(freq_hz > 0.0)) throw std::invalid_argument("frequency must be positive");
    return freq_hz >= codec.passband_low_hz && freq_hz <= codec.passband_high_hz;
}

std::string_view to_string(Grade g)
{
    switch (g) {
    case Grade::Good: return "Good";
    case Grade::Degraded: return "Degraded";
    case Grade::Unintelligible: return "Unintelligible";
    }
    return "?";
}

Grade grade_for(double bytes_per_second)
{
    if (bytes_per_second >= kGoodRate) return Grade::Good;
    if (bytes_per_second <= kUnintelligibleRate) return Grade::Unintelligible;
    return Grade::Degraded;
}

Duration frame_offset(std::uint64_t k, std::uint32_t frames_per_second)
{
    return Duration{static_cast<std::int64_t>(k * 1000 / frames_per_second)};
}

void MediaStream::on_delivered(SimTime emitted_at, std::uint32_t bytes)
{
    ++delivered_frames;
    delivered_bytes += bytes;
    delivered_by_second[emitted_at.count() / 1000] += bytes;
}

std::uint64_t MediaStream::delivered_in(SimTime from, Duration window) const
{
    // Seconds are the bucketing unit; callers align windows to whole seconds.
    std::int64_t first = from.count() / 1000;
    std::int64_t last = (from + window).count() / 1000;
    std::uint64_t total = 0;
    for (auto it = delivered_by_second.lower_bound(first); it != delivered_by_second.end() && it->first < last; ++it)
        total += it->second;
    return total;
}

QualityReport quality(const MediaStream& stream, SimTime from, Duration window)
{
    if (window < Duration{1000}) throw std::invalid_argument("quality window must be at least 1 s");
    QualityReport r;
    r.achieved_rate = static_cast<double>(stream.delivered_in(from, window)) * 1000.0 / static_cast<double>(window.count());
    r.grade = grade_for(r.achieved_rate);
    return r;
}

void FramePacer::start(Scheduler& sched, SimTime start, std::uint32_t per_second, std::function<void(std::uint64_t)> tick)
{
    stop();
    if (per_second == 0) throw std::invalid_argument("frame rate must be positive");
    sched_ = &sched;
    start_ = start;
    per_second_ = per_second;
    next_k_ = 0;
    tick_ = std::move(tick);
    arm();
}

void FramePacer::stop()
{
    if (sched_ && pending_) sched_->cancel(*pending_);
    pending_.reset();
    sched_ = nullptr;
}

void FramePacer::arm()
{
    SimTime at = start_ + frame_offset(next_k_, per_second_);
    pending_ = sched_->schedule(at, [this] {
        pending_.reset();
        std::uint64_t k = next_k_++;
        arm();
        tick_(k);
    });
}

}  // namespace skysim
