#pragma once

// Simulated multi-host runtime: H workers as in-process threads, ordered
// point-to-point channels, a timed barrier, ring transfers, and a
// deterministic rank-ordered allreduce. Workers own their shard tensors;
// everything that crosses workers goes through channel payloads (plain
// untracked buffers, modeling the transport rather than rank HBM).
//
// Volumes shard along the last (z) axis into contiguous slabs; the first
// (n mod H) shards take the extra plane. Shard bounds are expressed in the
// global normalized frame so the union of shard voxel centers reproduces the
// unsharded lattice.

#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <deque>
#include <exception>
#include <memory>
#include <mutex>
#include <stdexcept>
#include <thread>
#include <utility>
#include <vector>

#include "voxreg/geometry.hpp"
#include "voxreg/volume.hpp"

namespace voxreg {

struct ShardSpec {
    int rank = 0;
    int world = 1;
    int axis = 2; // always the last axis
    std::int64_t lo = 0, hi = 0;
    Dims3 global_dims;
    DomainBounds bounds;

    std::int64_t thickness() const { return hi - lo; }
    Dims3 local_dims() const { return {global_dims.nx, global_dims.ny, hi - lo}; }
    std::int64_t voxel_count() const { return local_dims().voxels(); }
};

inline std::vector<std::pair<std::int64_t, std::int64_t>> shard_ranges(std::int64_t n, int world) {
    if (world < 1 || n < world)
        throw std::invalid_argument("shard_ranges: need 1 <= world <= axis size");
    std::vector<std::pair<std::int64_t, std::int64_t>> r;
    const std::int64_t base = n / world;
    const std::int64_t extra = n % world;
    std::int64_t lo = 0;
    for (int h = 0; h < world; ++h) {
        const std::int64_t size = base + (h < extra ? 1 : 0);
        r.emplace_back(lo, lo + size);
        lo += size;
    }
    return r;
}

inline ShardSpec make_shard_spec(Dims3 global, int world, int rank) {
    const auto ranges = shard_ranges(global.nz, world);
    ShardSpec s;
    s.rank = rank;
    s.world = world;
    s.lo = ranges[static_cast<std::size_t>(rank)].first;
    s.hi = ranges[static_cast<std::size_t>(rank)].second;
    s.global_dims = global;
    s.bounds.x_min = {-1, -1, axis_coord(s.lo, global.nz)};
    s.bounds.x_max = {1, 1, axis_coord(s.hi - 1, global.nz)};
    return s;
}

template <typename T>
Volume3<T> extract_slab(const Volume3<T>& v, const ShardSpec& s) {
    Volume3<T> out = Volume3<T>::zeros(s.local_dims());
    out.spacing = v.spacing;
    out.origin = v.origin;
    const std::size_t plane = static_cast<std::size_t>(v.dims.nx * v.dims.ny);
    std::copy(v.data.begin() + static_cast<std::ptrdiff_t>(plane * static_cast<std::size_t>(s.lo)),
              v.data.begin() + static_cast<std::ptrdiff_t>(plane * static_cast<std::size_t>(s.hi)),
              out.data.begin());
    return out;
}

template <typename T>
WarpField<T> extract_slab(const WarpField<T>& w, const ShardSpec& s) {
    WarpField<T> out = WarpField<T>::zeros(s.local_dims());
    const std::size_t plane = static_cast<std::size_t>(3 * w.dims.nx * w.dims.ny);
    std::copy(w.data.begin() + static_cast<std::ptrdiff_t>(plane * static_cast<std::size_t>(s.lo)),
              w.data.begin() + static_cast<std::ptrdiff_t>(plane * static_cast<std::size_t>(s.hi)),
              out.data.begin());
    return out;
}

template <typename T>
std::vector<Volume3<T>> shard_volume(const Volume3<T>& v, int world) {
    std::vector<Volume3<T>> shards;
    for (int h = 0; h < world; ++h) shards.push_back(extract_slab(v, make_shard_spec(v.dims, world, h)));
    return shards;
}

template <typename T>
std::vector<WarpField<T>> shard_warp(const WarpField<T>& w, int world) {
    std::vector<WarpField<T>> shards;
    for (int h = 0; h < world; ++h) shards.push_back(extract_slab(w, make_shard_spec(w.dims, world, h)));
    return shards;
}

template <typename T>
Volume3<T> gather_volume(const std::vector<Volume3<T>>& shards, Dims3 global) {
    Volume3<T> out = Volume3<T>::zeros(global);
    if (!shards.empty()) {
        out.spacing = shards.front().spacing;
        out.origin = shards.front().origin;
    }
    const auto ranges = shard_ranges(global.nz, static_cast<int>(shards.size()));
    const std::size_t plane = static_cast<std::size_t>(global.nx * global.ny);
    for (std::size_t h = 0; h < shards.size(); ++h)
        std::copy(shards[h].data.begin(), shards[h].data.end(),
                  out.data.begin() + static_cast<std::ptrdiff_t>(plane * static_cast<std::size_t>(ranges[h].first)));
    return out;
}

template <typename T>
WarpField<T> gather_warp(const std::vector<WarpField<T>>& shards, Dims3 global) {
    WarpField<T> out = WarpField<T>::zeros(global);
    const auto ranges = shard_ranges(global.nz, static_cast<int>(shards.size()));
    const std::size_t plane = static_cast<std::size_t>(3 * global.nx * global.ny);
    for (std::size_t h = 0; h < shards.size(); ++h)
        std::copy(shards[h].data.begin(), shards[h].data.end(),
                  out.data.begin() + static_cast<std::ptrdiff_t>(plane * static_cast<std::size_t>(ranges[h].first)));
    return out;
}

// --- runtime ----------------------------------------------------------------

using ChannelPayload = std::vector<double>;

class Channel {
public:
    void send(ChannelPayload msg) {
        {
            std::lock_guard<std::mutex> lk(m_);
            q_.push_back(std::move(msg));
        }
        cv_.notify_one();
    }

    ChannelPayload recv(std::chrono::milliseconds timeout) {
        std::unique_lock<std::mutex> lk(m_);
        if (!cv_.wait_for(lk, timeout, [&] { return !q_.empty(); }))
            throw std::runtime_error("fabric: recv timeout (mismatched collective?)");
        ChannelPayload msg = std::move(q_.front());
        q_.pop_front();
        return msg;
    }

private:
    std::mutex m_;
    std::condition_variable cv_;
    std::deque<ChannelPayload> q_;
};

class TimedBarrier {
public:
    explicit TimedBarrier(int world) : world_(world) {}

    void arrive_and_wait(std::chrono::milliseconds timeout) {
        std::unique_lock<std::mutex> lk(m_);
        const std::uint64_t gen = generation_;
        if (++count_ == world_) {
            count_ = 0;
            ++generation_;
            cv_.notify_all();
            return;
        }
        if (!cv_.wait_for(lk, timeout, [&] { return generation_ != gen; }))
            throw std::runtime_error("fabric: barrier timeout (mismatched collective?)");
    }

private:
    std::mutex m_;
    std::condition_variable cv_;
    int world_;
    int count_ = 0;
    std::uint64_t generation_ = 0;
};

class WorkerContext;

class WorkerGroup {
public:
    explicit WorkerGroup(int world,
                         std::chrono::milliseconds timeout = std::chrono::milliseconds(30000))
        : world_(world), timeout_(timeout), barrier_(world) {
        if (world < 1) throw std::invalid_argument("WorkerGroup: world must be >= 1");
        channels_.resize(static_cast<std::size_t>(world) * static_cast<std::size_t>(world));
        for (auto& c : channels_) c = std::make_unique<Channel>();
    }

    int world_size() const { return world_; }

    template <typename Fn>
    void run(Fn&& fn);

private:
    friend class WorkerContext;
    Channel& channel(int from, int to) {
        return *channels_[static_cast<std::size_t>(from) * static_cast<std::size_t>(world_) +
                          static_cast<std::size_t>(to)];
    }

    int world_;
    std::chrono::milliseconds timeout_;
    TimedBarrier barrier_;
    std::vector<std::unique_ptr<Channel>> channels_;
};

class WorkerContext {
public:
    WorkerContext(WorkerGroup& group, int rank) : group_(group), rank_(rank) {}

    int rank() const { return rank_; }
    int world_size() const { return group_.world_; }

    void barrier() { group_.barrier_.arrive_and_wait(group_.timeout_); }

    void send(int to, ChannelPayload msg) {
        elements_sent_ += msg.size();
        ++messages_sent_;
        group_.channel(rank_, to).send(std::move(msg));
    }

    ChannelPayload recv(int from) { return group_.channel(from, rank_).recv(group_.timeout_); }

    // Block from rank (self - offset) mod H; every rank calls collectively.
    ChannelPayload ring_send_recv(const ChannelPayload& block, int offset) {
        const int w = world_size();
        const int off = ((offset % w) + w) % w;
        if (off == 0) return block;
        send((rank_ + off) % w, block);
        return recv(((rank_ - off) % w + w) % w);
    }

    // Deterministic: every rank ends with the contributions summed in rank
    // order, so results are identical across ranks and across runs.
    void allreduce_sum(std::vector<double>& v) {
        last_allreduce_payload_ = v.size();
        const int w = world_size();
        if (w == 1) return;
        std::vector<ChannelPayload> contrib(static_cast<std::size_t>(w));
        contrib[static_cast<std::size_t>(rank_)] = v;
        for (int step = 1; step < w; ++step) {
            const int src = ((rank_ - step) % w + w) % w;
            contrib[static_cast<std::size_t>(src)] = ring_send_recv(v, step);
        }
        std::vector<double> acc(v.size(), 0.0);
        for (int h = 0; h < w; ++h) {
            const auto& c = contrib[static_cast<std::size_t>(h)];
            if (c.size() != v.size()) throw std::runtime_error("fabric: allreduce size mismatch");
            for (std::size_t i = 0; i < v.size(); ++i) acc[i] += c[i];
        }
        v = std::move(acc);
    }

    double allreduce_scalar(double x) {
        std::vector<double> v{x};
        allreduce_sum(v);
        return v[0];
    }

    std::uint64_t elements_sent() const { return elements_sent_; }
    std::uint64_t messages_sent() const { return messages_sent_; }
    std::size_t last_allreduce_payload() const { return last_allreduce_payload_; }

private:
    WorkerGroup& group_;
    int rank_;
    std::uint64_t elements_sent_ = 0;
    std::uint64_t messages_sent_ = 0;
    std::size_t last_allreduce_payload_ = 0;
};

template <typename Fn>
void WorkerGroup::run(Fn&& fn) {
    std::vector<std::thread> threads;
    std::vector<std::exception_ptr> errors(static_cast<std::size_t>(world_));
    for (int r = 0; r < world_; ++r) {
        threads.emplace_back([this, r, &fn, &errors] {
            try {
                WorkerContext ctx(*this, r);
                fn(ctx);
            } catch (...) {
                errors[static_cast<std::size_t>(r)] = std::current_exception();
            }
        });
    }
    for (auto& t : threads) t.join();
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
}

// --- halo exchange ----------------------------------------------------------

template <typename T>
struct HaloBlock {
    tracked_vector<T> data;
    Dims3 dims;           // local dims including halos
    int channels = 1;
    std::int64_t halo_lo = 0, halo_hi = 0;
};

// Augments a z-slab with up to `pad` planes from each ring neighbor. Rank 0
// has no left halo and rank H-1 no right halo.
template <typename T>
HaloBlock<T> halo_exchange(WorkerContext& ctx, const T* data, Dims3 local, int channels,
                           const ShardSpec& spec, std::int64_t pad) {
    if (pad < 0) throw std::invalid_argument("halo_exchange: pad must be >= 0");
    const int w = spec.world;
    if (pad > 0 && w > 1) {
        const auto ranges = shard_ranges(spec.global_dims.nz, w);
        if (spec.rank > 0 && pad > ranges[static_cast<std::size_t>(spec.rank - 1)].second -
                                       ranges[static_cast<std::size_t>(spec.rank - 1)].first)
            throw std::invalid_argument("halo_exchange: pad exceeds left neighbor thickness");
        if (spec.rank < w - 1 && pad > ranges[static_cast<std::size_t>(spec.rank + 1)].second -
                                           ranges[static_cast<std::size_t>(spec.rank + 1)].first)
            throw std::invalid_argument("halo_exchange: pad exceeds right neighbor thickness");
    }

    const std::size_t plane =
        static_cast<std::size_t>(local.nx) * static_cast<std::size_t>(local.ny) *
        static_cast<std::size_t>(channels);
    HaloBlock<T> out;
    out.channels = channels;
    out.halo_lo = (pad > 0 && spec.rank > 0) ? pad : 0;
    out.halo_hi = (pad > 0 && spec.rank < w - 1) ? pad : 0;
    out.dims = {local.nx, local.ny, local.nz + out.halo_lo + out.halo_hi};
    out.data.assign(plane * static_cast<std::size_t>(out.dims.nz), T(0));

    if (pad > 0 && w > 1) {
        if (spec.rank > 0) { // my first planes become the left neighbor's right halo
            ChannelPayload msg(plane * static_cast<std::size_t>(pad));
            for (std::size_t i = 0; i < msg.size(); ++i) msg[i] = static_cast<double>(data[i]);
            ctx.send(spec.rank - 1, std::move(msg));
        }
        if (spec.rank < w - 1) { // my last planes become the right neighbor's left halo
            ChannelPayload msg(plane * static_cast<std::size_t>(pad));
            const std::size_t base = plane * static_cast<std::size_t>(local.nz - pad);
            for (std::size_t i = 0; i < msg.size(); ++i) msg[i] = static_cast<double>(data[base + i]);
            ctx.send(spec.rank + 1, std::move(msg));
        }
    }

    std::copy(data, data + plane * static_cast<std::size_t>(local.nz),
              out.data.begin() + static_cast<std::ptrdiff_t>(plane * static_cast<std::size_t>(out.halo_lo)));

    if (pad > 0 && w > 1) {
        if (spec.rank > 0) {
            const ChannelPayload msg = ctx.recv(spec.rank - 1);
            for (std::size_t i = 0; i < msg.size(); ++i) out.data[i] = static_cast<T>(msg[i]);
        }
        if (spec.rank < w - 1) {
            const ChannelPayload msg = ctx.recv(spec.rank + 1);
            const std::size_t base =
                plane * static_cast<std::size_t>(out.halo_lo + local.nz);
            for (std::size_t i = 0; i < msg.size(); ++i)
                out.data[base + i] = static_cast<T>(msg[i]);
        }
    }
    return out;
}

} // namespace voxreg
