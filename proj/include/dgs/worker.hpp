#pragma once

#include "dgs/engine.hpp"
#include "dgs/optim.hpp"
#include "dgs/protocol.hpp"

#include <chrono>
#include <cstring>
#include <map>
#include <optional>
#include <stdexcept>
#include <unordered_map>
#include <variant>
#include <vector>

namespace dgs {

/// Sequential sub-model: owns one subset's parameters and optimizer moments,
/// renders partials, applies gradient steps. Communicates only through
/// Message values, so the same core backs in-process and child-process
/// workers.
template <typename T>
class WorkerCore {
  public:
    /// Handle one request and produce its response.
    Message<T> handle(Message<T> msg) {
        return std::visit([this](auto&& m) -> Message<T> { return dispatch(std::move(m)); },
                          std::move(msg));
    }

    int k() const { return k_; }
    std::uint64_t epoch() const { return epoch_; }
    std::uint64_t step() const { return adam_step_; }
    const std::vector<Splat<T>>& splats() const { return splats_; }
    const Subspace<T>& subspace() const { return subspace_; }

  private:
    Message<T> dispatch(MsgRepartition<T> m) {
        k_ = m.k;
        epoch_ = m.epoch;
        adam_step_ = m.adam_step;
        config_ = m.config;
        subspace_ = std::move(m.subspace);
        splats_.clear();
        moments_.clear();
        index_by_id_.clear();
        splats_.reserve(m.splats.size());
        moments_.reserve(m.splats.size());
        for (auto& p : m.splats) {
            index_by_id_.emplace(p.splat.id, splats_.size());
            splats_.push_back(std::move(p.splat));
            moments_.push_back(std::move(p.moments));
        }
        shared_ids_ = std::move(m.shared_ids);
        pending_.reset();
        batch_grads_.reset();
        views_in_batch_ = 0;
        pending_views_.clear();
        return MsgAck<T>{0, k_};
    }

    Message<T> dispatch(MsgRenderTask<T> m) {
        if (m.epoch != epoch_) throw std::runtime_error("partition epoch mismatch");
        const auto t0 = std::chrono::steady_clock::now();
        MsgPartialResult<T> out;
        out.view_id = m.view_id;
        out.k = k_;
        std::uint64_t contribs = 0;
        {
            PartialImage<T> p = partial_render<T>(splats_, subspace_, m.camera, m.options);
            out.color = std::move(p.color);
            out.transmittance = std::move(p.transmittance);
            for (const T& t : out.transmittance.data)
                if (t != T(1)) ++contribs;  // touched pixels as a cheap load proxy
        }
        out.contributions = contribs;
        out.compute_ms =
            std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
        pending_views_[m.view_id] = {m.camera, m.options};
        // Render-only traffic never consumes these; keep the window bounded.
        const std::size_t cap = std::max<std::size_t>(16, 2 * std::size_t(std::max(1, config_.batch_size)));
        while (pending_views_.size() > cap) pending_views_.erase(pending_views_.begin());
        return out;
    }

    Message<T> dispatch(MsgBackwardTask<T> m) {
        const auto it = pending_views_.find(m.view_id);
        if (it == pending_views_.end())
            throw std::runtime_error("backward for unknown view " + std::to_string(m.view_id));
        const auto [camera, options] = it->second;
        pending_views_.erase(it);

        GradBuffers<T> grads = partial_render_backward<T>(splats_, subspace_, camera, m.grad_color,
                                                          m.grad_transmittance, options);
        if (!batch_grads_) {
            batch_grads_.emplace(std::span<const Splat<T>>(splats_));
        }
        batch_grads_->add(grads);
        ++views_in_batch_;

        if (views_in_batch_ < config_.batch_size) return MsgAck<T>{0, k_};

        if (config_.grad_sync) {
            // Hold the step until the reduced gradients come back.
            pending_ = std::move(*batch_grads_);
            batch_grads_.reset();
            views_in_batch_ = 0;
            MsgGradSync<T> sync;
            sync.view_id = m.view_id;
            for (SplatId id : shared_ids_) {
                const std::size_t i = index_by_id_.at(id);
                GradEntry<T> e;
                e.id = id;
                e.d_mu = pending_->d_mu[i];
                e.d_log_scale = pending_->d_log_scale[i];
                e.d_rotation = pending_->d_rotation[i];
                e.d_opacity = pending_->d_opacity_logit[i];
                e.d_sh = pending_->d_sh[i];
                sync.grads.push_back(std::move(e));
            }
            return sync;
        }
        apply_step(*batch_grads_);
        batch_grads_.reset();
        views_in_batch_ = 0;
        return MsgAck<T>{0, k_};
    }

    Message<T> dispatch(MsgGradSync<T> m) {
        if (!pending_) throw std::runtime_error("gradient sync without a pending step");
        for (const auto& e : m.grads) {
            const auto it = index_by_id_.find(e.id);
            if (it == index_by_id_.end()) continue;
            const std::size_t i = it->second;
            pending_->d_mu[i] = e.d_mu;
            pending_->d_log_scale[i] = e.d_log_scale;
            pending_->d_rotation[i] = e.d_rotation;
            pending_->d_opacity_logit[i] = e.d_opacity;
            pending_->d_sh[i] = e.d_sh;
        }
        apply_step(*pending_);
        pending_.reset();
        return MsgAck<T>{0, k_};
    }

    Message<T> dispatch(MsgSnapshot<T>) { return snapshot(); }
    Message<T> dispatch(MsgCheckpoint<T>) { return snapshot(); }
    Message<T> dispatch(MsgShutdown<T>) { return MsgAck<T>{0, k_}; }
    Message<T> dispatch(MsgAck<T>) { throw ProtocolError("worker received an ack"); }
    Message<T> dispatch(MsgPartialResult<T>) { throw ProtocolError("worker received a partial result"); }
    Message<T> dispatch(MsgSnapshotResult<T>) { throw ProtocolError("worker received a snapshot result"); }

    Message<T> snapshot() const {
        MsgSnapshotResult<T> out;
        out.k = k_;
        out.adam_step = adam_step_;
        out.splats.reserve(splats_.size());
        for (std::size_t i = 0; i < splats_.size(); ++i) out.splats.push_back({splats_[i], moments_[i]});
        return out;
    }

    void apply_step(const GradBuffers<T>& grads) {
        const double lr_pos = position_lr(config_, adam_step_);
        ++adam_step_;
        for (std::size_t i = 0; i < splats_.size(); ++i)
            adam_apply(splats_[i], grads, i, moments_[i], config_, lr_pos, adam_step_);
    }

    int k_ = -1;
    std::uint64_t epoch_ = 0;
    std::uint64_t adam_step_ = 0;
    TrainConfig config_;
    Subspace<T> subspace_;
    std::vector<Splat<T>> splats_;
    std::vector<AdamMoments<T>> moments_;
    std::vector<SplatId> shared_ids_;
    std::unordered_map<SplatId, std::size_t> index_by_id_;
    std::map<std::uint64_t, std::pair<Camera<T>, RenderOptions>> pending_views_;
    std::optional<GradBuffers<T>> batch_grads_;
    int views_in_batch_ = 0;
    std::optional<GradBuffers<T>> pending_;  // awaiting reduced gradients
};

/// Child-process main loop: framed messages over the inherited descriptors.
template <typename T>
int worker_main(int fd_in, int fd_out) {
    FrameChannel ch(fd_in, fd_out);
    WorkerCore<T> core;
    try {
        for (;;) {
            const auto body = ch.recv(-1);
            auto [msg, seq] = decode_message<T>(body.data(), body.size());
            const bool last = std::holds_alternative<MsgShutdown<T>>(msg);
            const Message<T> resp = core.handle(std::move(msg));
            std::vector<std::uint8_t> out;
            encode_message<T>(resp, seq, out);
            ch.send(out);
            if (last) return 0;
        }
    } catch (const std::exception& e) {
        std::fprintf(stderr, "dgs worker: %s\n", e.what());
        return 1;
    }
}

/// Re-exec hook: binaries that spawn process workers call this first; when the
/// process was launched as a worker it never returns to the caller's main.
inline bool maybe_worker_entry(int argc, char** argv) {
    if (argc >= 3 && std::strcmp(argv[1], "__dgs-worker") == 0) {
        const int width = std::atoi(argv[2]);
        const int rc = width == 8 ? worker_main<double>(3, 4) : worker_main<float>(3, 4);
        std::exit(rc);
    }
    return false;
}

}  // namespace dgs
