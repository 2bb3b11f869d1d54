#pragma once

#include "dgs/engine.hpp"
#include "dgs/loss.hpp"
#include "dgs/protocol.hpp"
#include "dgs/worker.hpp"

#include <algorithm>
#include <chrono>
#include <map>
#include <memory>
#include <set>
#include <thread>
#include <variant>
#include <vector>

#include <csignal>
#include <fcntl.h>
#include <spawn.h>
#include <sys/wait.h>
#include <unistd.h>

extern char** environ;

namespace dgs {

/// Analytic map-section size of a message; the in-process links account with
/// this, the pipe links with real bytes.
template <typename T>
std::uint64_t message_map_bytes(const Message<T>& msg) {
    if (const auto* p = std::get_if<MsgPartialResult<T>>(&msg))
        return std::uint64_t(p->color.data.size() + p->transmittance.data.size()) * sizeof(T);
    if (const auto* b = std::get_if<MsgBackwardTask<T>>(&msg))
        return std::uint64_t(b->grad_color.data.size() + b->grad_transmittance.data.size()) * sizeof(T);
    return 0;
}

template <typename T>
class WorkerLink {
  public:
    virtual ~WorkerLink() = default;
    virtual void send(Message<T> msg) = 0;
    virtual Message<T> recv(int timeout_ms) = 0;
    const LinkStats& stats() const { return stats_; }
    int k = -1;

  protected:
    LinkStats stats_;
};

/// In-process worker on its own thread. Counts the map payload it would have
/// serialized; envelope bytes are zero by construction.
template <typename T>
class ThreadWorkerLink final : public WorkerLink<T> {
  public:
    ThreadWorkerLink() : thread_([this] { run(); }) {}

    ~ThreadWorkerLink() override {
        if (!stopped_) {
            try {
                send(MsgShutdown<T>{});
                recv(2000);
            } catch (...) {
            }
        }
        if (thread_.joinable()) thread_.join();
    }

    void send(Message<T> msg) override {
        this->stats_.add_sent(message_map_bytes(msg), message_map_bytes(msg));
        if (std::holds_alternative<MsgShutdown<T>>(msg)) stopped_ = true;
        inbox_.push(std::move(msg));
    }

    Message<T> recv(int timeout_ms) override {
        Slot s = outbox_.pop(timeout_ms);
        if (s.err) std::rethrow_exception(s.err);
        this->stats_.add_recv(message_map_bytes(*s.msg), message_map_bytes(*s.msg));
        return std::move(*s.msg);
    }

  private:
    struct Slot {
        std::optional<Message<T>> msg;
        std::exception_ptr err;
    };

    void run() {
        for (;;) {
            Message<T> m = inbox_.pop();
            const bool last = std::holds_alternative<MsgShutdown<T>>(m);
            Slot s;
            try {
                s.msg = core_.handle(std::move(m));
            } catch (...) {
                s.err = std::current_exception();
            }
            const bool failed = s.err != nullptr;
            outbox_.push(std::move(s));
            if (last || failed) return;
        }
    }

    WorkerCore<T> core_;
    MsgQueue<Message<T>> inbox_;
    MsgQueue<Slot> outbox_;
    std::thread thread_;
    bool stopped_ = false;
};

/// Child-process worker over pipes; the child is this same executable
/// re-invoked through the worker entry hook (descriptors 3 and 4).
template <typename T>
class ProcessWorkerLink final : public WorkerLink<T> {
  public:
    ProcessWorkerLink() {
        // A worker crash must surface as a channel error, not kill the manager.
        static const bool sigpipe_ignored = [] {
            ::signal(SIGPIPE, SIG_IGN);
            return true;
        }();
        (void)sigpipe_ignored;

        int to_child[2], from_child[2];
        if (::pipe2(to_child, O_CLOEXEC) != 0 || ::pipe2(from_child, O_CLOEXEC) != 0)
            throw std::runtime_error("pipe2() failed");
        // Inheritable copies of the child's ends, parked above the 3/4 targets
        // so the dup2 file actions cannot collide with them.
        const int in_src = ::fcntl(to_child[0], F_DUPFD, 10);
        const int out_src = ::fcntl(from_child[1], F_DUPFD, 10);
        ::close(to_child[0]);
        ::close(from_child[1]);
        if (in_src < 0 || out_src < 0) throw std::runtime_error("fcntl(F_DUPFD) failed");

        posix_spawn_file_actions_t fa;
        posix_spawn_file_actions_init(&fa);
        posix_spawn_file_actions_adddup2(&fa, in_src, 3);
        posix_spawn_file_actions_adddup2(&fa, out_src, 4);
        posix_spawn_file_actions_addclose(&fa, in_src);
        posix_spawn_file_actions_addclose(&fa, out_src);

        char width[2] = {sizeof(T) == 8 ? '8' : '4', 0};
        char arg0[] = "/proc/self/exe";
        char arg1[] = "__dgs-worker";
        char* argv[] = {arg0, arg1, width, nullptr};
        const int rc = posix_spawn(&pid_, "/proc/self/exe", &fa, nullptr, argv, environ);
        posix_spawn_file_actions_destroy(&fa);
        ::close(in_src);
        ::close(out_src);
        if (rc != 0) {
            ::close(to_child[1]);
            ::close(from_child[0]);
            throw std::runtime_error("posix_spawn failed for worker process");
        }
        channel_ = std::make_unique<FrameChannel>(from_child[0], to_child[1]);
        channel_->own_fds();
    }

    ~ProcessWorkerLink() override {
        if (!stopped_) {
            try {
                send(MsgShutdown<T>{});
                recv(2000);
            } catch (...) {
            }
        }
        channel_.reset();
        if (pid_ > 0) {
            int status = 0;
            ::waitpid(pid_, &status, 0);
        }
    }

    void send(Message<T> msg) override {
        if (std::holds_alternative<MsgShutdown<T>>(msg)) stopped_ = true;
        std::vector<std::uint8_t> body;
        const std::uint64_t map_bytes = encode_message<T>(msg, seq_++, body);
        this->stats_.add_sent(4 + body.size(), map_bytes);
        channel_->send(body);
    }

    Message<T> recv(int timeout_ms) override {
        const auto body = channel_->recv(timeout_ms);
        std::uint64_t map_bytes = 0;
        auto [msg, seq] = decode_message<T>(body.data(), body.size(), &map_bytes);
        (void)seq;
        this->stats_.add_recv(4 + body.size(), map_bytes);
        return std::move(msg);
    }

  private:
    pid_t pid_ = -1;
    std::unique_ptr<FrameChannel> channel_;
    std::uint64_t seq_ = 0;
    bool stopped_ = false;
};

// ---------------------------------------------------------------------------
// Manager.
// ---------------------------------------------------------------------------

/// Per-barrier timing/communication record used by the bench module.
struct BatchTiming {
    double wall_ms = 0;
    std::vector<double> compute_ms;           // per worker, summed over the batch
    std::vector<std::uint64_t> forward_map_bytes;  // per worker, over the batch
};

/// Central coordinator: owns the partition table, distributes sub-models,
/// schedules render/backward rounds and reductions, merges partials. All
/// worker interaction goes through the message protocol.
template <typename T>
class Manager {
  public:
    Manager(std::vector<Splat<T>> splats, TrainConfig config, RenderOptions options,
            bool process_workers = false, int timeout_ms = 120000)
        : config_(config), options_(options), timeout_ms_(timeout_ms) {
        config_.validate();
        const int k_count = 1 << config_.kd_depth;
        for (int k = 0; k < k_count; ++k) {
            links_.push_back(process_workers
                                 ? std::unique_ptr<WorkerLink<T>>(new ProcessWorkerLink<T>())
                                 : std::unique_ptr<WorkerLink<T>>(new ThreadWorkerLink<T>()));
            links_.back()->k = k;
        }
        std::vector<SplatPack<T>> packs;
        packs.reserve(splats.size());
        for (auto& s : splats) {
            AdamMoments<T> mom = AdamMoments<T>::like(s);
            packs.push_back({std::move(s), std::move(mom)});
        }
        distribute(std::move(packs), 0);
    }

    ~Manager() {
        try {
            shutdown();
        } catch (...) {
        }
    }

    int worker_count() const { return static_cast<int>(links_.size()); }
    const PartitionTable<T>& table() const { return table_; }
    std::uint64_t epoch() const { return epoch_; }
    std::uint64_t splat_count() const { return id_checksum_.size(); }

    const LinkStats& link_stats(int k) const { return links_[k]->stats(); }

    /// Render one view through the distributed pipeline.
    RenderedImage<T> render(const Camera<T>& cam, const Vec3<T>& background,
                            BatchTiming* timing = nullptr) {
        std::vector<RenderedImage<T>> images;
        const Camera<T> cams[1] = {cam};
        const BatchTiming t = render_batch(cams, background, &images);
        if (timing) *timing = t;
        return std::move(images[0]);
    }

    /// Dispatch a batch of render tasks to every worker, then collect and
    /// merge. Workers process the batch back to back; the manager blocks at
    /// the barrier, which is what the bench's wait-fraction measures.
    BatchTiming render_batch(std::span<const Camera<T>> cams, const Vec3<T>& background,
                             std::vector<RenderedImage<T>>* out_images,
                             std::vector<std::vector<PartialImage<T>>>* out_partials = nullptr,
                             std::vector<PixelOrders>* out_orders = nullptr) {
        BatchTiming timing;
        timing.compute_ms.assign(links_.size(), 0.0);
        timing.forward_map_bytes.assign(links_.size(), 0);
        const auto t0 = std::chrono::steady_clock::now();

        std::vector<std::uint64_t> before_bytes(links_.size());
        for (std::size_t k = 0; k < links_.size(); ++k) before_bytes[k] = links_[k]->stats().map_bytes_recv;

        const std::uint64_t first_view = next_view_;
        for (const auto& cam : cams) {
            MsgRenderTask<T> task{next_view_++, epoch_, cam, options_};
            for (auto& link : links_) link->send(task);
        }
        if (out_images) out_images->clear();
        for (std::size_t v = 0; v < cams.size(); ++v) {
            std::vector<PartialImage<T>> partials;
            for (auto& link : links_) {
                auto msg = recv_checked(*link);
                auto* pr = std::get_if<MsgPartialResult<T>>(&msg);
                if (!pr) throw ProtocolError("expected partial result from worker " + std::to_string(link->k));
                if (pr->view_id != first_view + v)
                    throw ProtocolError("view id out of order from worker " + std::to_string(link->k));
                if (pr->color.width != cams[v].width || pr->color.height != cams[v].height)
                    throw ProtocolError("partial shape mismatch from worker " + std::to_string(link->k));
                timing.compute_ms[link->k] += pr->compute_ms;
                partials.push_back(PartialImage<T>{pr->k, pr->view_id, std::move(pr->color),
                                                   std::move(pr->transmittance)});
            }
            PixelOrders orders = compute_pixel_orders(table_, cams[v]);
            if (out_images) out_images->push_back(merge<T>(partials, orders, background));
            if (out_partials) out_partials->push_back(std::move(partials));
            if (out_orders) out_orders->push_back(std::move(orders));
        }
        for (std::size_t k = 0; k < links_.size(); ++k)
            timing.forward_map_bytes[k] = links_[k]->stats().map_bytes_recv - before_bytes[k];
        timing.wall_ms =
            std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
        return timing;
    }

    struct StepResult {
        double loss = 0;
        double psnr = 0;  // over the batch (from the mean MSE)
        std::uint64_t comm_bytes = 0;  // map payload, both directions, this step
    };

    /// One barrier-synchronized training round over a batch of views.
    StepResult train_step(std::span<const Camera<T>> cams, std::span<const Image<T>> targets,
                          const Vec3<T>& background) {
        if (cams.size() != targets.size() || cams.empty())
            throw std::invalid_argument("train_step: need one target per camera");
        if (static_cast<int>(cams.size()) != config_.batch_size)
            throw std::invalid_argument("train_step: batch size mismatch with config");

        std::uint64_t bytes0 = total_map_bytes();
        std::vector<RenderedImage<T>> images;
        std::vector<std::vector<PartialImage<T>>> partials;
        std::vector<PixelOrders> orders;
        const std::uint64_t first_view = next_view_;
        render_batch(cams, background, &images, &partials, &orders);

        StepResult result;
        double mse_acc = 0;
        const T inv_batch = T(1) / T(cams.size());
        for (std::size_t v = 0; v < cams.size(); ++v) {
            LossResult<T> l = loss<T>(images[v].color, targets[v], config_.lambda_ssim);
            result.loss += double(l.value) / double(cams.size());
            mse_acc += double(mse(images[v].color, targets[v])) / double(cams.size());
            for (auto& g : l.grad.data) g *= inv_batch;
            const Image<T> grad_t_total(cams[v].width, cams[v].height, 1, T(0));
            auto per_subset = merge_backward<T>(partials[v], orders[v], l.grad, grad_t_total, background);
            for (auto& link : links_) {
                MsgBackwardTask<T> task;
                task.view_id = first_view + v;
                task.grad_color = std::move(per_subset[link->k].d_color);
                task.grad_transmittance = std::move(per_subset[link->k].d_transmittance);
                link->send(std::move(task));
            }
        }

        // Batch barrier: every backward task is acknowledged; the final one
        // triggers the optimizer step (after reduction when sync is on).
        for (std::size_t v = 0; v + 1 < cams.size(); ++v)
            for (auto& link : links_) expect_ack(*link);

        if (config_.grad_sync) {
            std::vector<MsgGradSync<T>> local(links_.size());
            for (auto& link : links_) {
                auto msg = recv_checked(*link);
                auto* gs = std::get_if<MsgGradSync<T>>(&msg);
                if (!gs) throw ProtocolError("expected gradient sync from worker " + std::to_string(link->k));
                local[link->k] = std::move(*gs);
            }
            // Reduce in worker index order (deterministic), then send each
            // worker the sums for its own shared members.
            std::map<SplatId, GradEntry<T>> reduced;
            for (const auto& gs : local) {
                for (const auto& e : gs.grads) {
                    auto [it, fresh] = reduced.try_emplace(e.id, e);
                    if (fresh) continue;
                    it->second.d_mu += e.d_mu;
                    it->second.d_log_scale += e.d_log_scale;
                    it->second.d_rotation += e.d_rotation;
                    it->second.d_opacity += e.d_opacity;
                    for (std::size_t j = 0; j < e.d_sh.size(); ++j) it->second.d_sh[j] += e.d_sh[j];
                }
            }
            for (auto& link : links_) {
                MsgGradSync<T> out;
                out.view_id = first_view + cams.size() - 1;
                for (SplatId id : shared_by_worker_[link->k]) out.grads.push_back(reduced.at(id));
                link->send(std::move(out));
            }
            for (auto& link : links_) expect_ack(*link);
        } else {
            for (auto& link : links_) expect_ack(*link);
        }
        result.psnr = mse_acc == 0 ? std::numeric_limits<double>::infinity() : 10.0 * std::log10(1.0 / mse_acc);
        result.comm_bytes = total_map_bytes() - bytes0;
        return result;
    }

    /// Gather every sub-model; shared splats resolved to the replica held by
    /// the subspace owning their center.
    std::vector<SplatPack<T>> snapshot(const std::string& checkpoint_path = "") {
        for (auto& link : links_) {
            if (checkpoint_path.empty()) link->send(MsgSnapshot<T>{});
            else link->send(MsgCheckpoint<T>{checkpoint_path});
        }
        std::vector<MsgSnapshotResult<T>> results(links_.size());
        for (auto& link : links_) {
            auto msg = recv_checked(*link);
            auto* sr = std::get_if<MsgSnapshotResult<T>>(&msg);
            if (!sr) throw ProtocolError("expected snapshot from worker " + std::to_string(link->k));
            results[link->k] = std::move(*sr);
        }
        adam_step_ = results.empty() ? adam_step_ : results[0].adam_step;
        // Replicas of a shared splat may have drifted (sync off). The replica
        // whose holder's subspace contains its center wins; if every replica
        // drifted out of its holder, the lowest worker index wins.
        std::vector<SplatPack<T>> merged;
        std::set<SplatId> seen;
        for (int k = 0; k < static_cast<int>(results.size()); ++k)
            for (auto& pack : results[k].splats)
                if (locate(table_, pack.splat.mu) == k && seen.insert(pack.splat.id).second)
                    merged.push_back(std::move(pack));
        for (int k = 0; k < static_cast<int>(results.size()); ++k)
            for (auto& pack : results[k].splats)
                if (!seen.count(pack.splat.id) && seen.insert(pack.splat.id).second)
                    merged.push_back(std::move(pack));
        if (seen.size() != id_checksum_.size()) throw std::runtime_error("snapshot lost splats");
        return merged;
    }

    /// Rebuild the KD partition on current centers and migrate parameters and
    /// optimizer state. The global splat set must be conserved.
    void repartition() {
        auto packs = snapshot();
        std::vector<SplatId> ids;
        ids.reserve(packs.size());
        for (const auto& p : packs) ids.push_back(p.splat.id);
        std::sort(ids.begin(), ids.end());
        if (ids != id_checksum_) throw std::runtime_error("repartition checksum mismatch");
        distribute(std::move(packs), epoch_ + 1);
    }

    void shutdown() {
        if (links_.empty()) return;
        for (auto& link : links_) link->send(MsgShutdown<T>{});
        for (auto& link : links_) expect_ack(*link);
        links_.clear();
    }

  private:
    void distribute(std::vector<SplatPack<T>> packs, std::uint64_t new_epoch) {
        epoch_ = new_epoch;
        std::vector<Vec3<T>> centers;
        centers.reserve(packs.size());
        for (const auto& p : packs) centers.push_back(p.splat.mu);
        table_ = build_kdtree<T>(centers, config_.kd_depth);

        std::vector<Splat<T>> splats;
        splats.reserve(packs.size());
        for (const auto& p : packs) splats.push_back(p.splat);  // membership needs ids+shape
        assign_subsets<T>(table_, splats, options_.truncation_radius);

        id_checksum_.clear();
        for (const auto& p : packs) id_checksum_.push_back(p.splat.id);
        std::sort(id_checksum_.begin(), id_checksum_.end());

        std::map<SplatId, int> owners_count;
        for (const auto& m : table_.membership)
            for (SplatId id : m) ++owners_count[id];

        std::map<SplatId, std::size_t> pack_index;
        for (std::size_t i = 0; i < packs.size(); ++i) pack_index[packs[i].splat.id] = i;

        shared_by_worker_.assign(links_.size(), {});
        for (auto& link : links_) {
            const int k = link->k;
            MsgRepartition<T> msg;
            msg.epoch = epoch_;
            msg.k = k;
            msg.adam_step = adam_step_;
            msg.config = config_;
            msg.subspace = table_.subspaces[k];
            for (SplatId id : table_.membership[k]) {
                msg.splats.push_back(packs[pack_index.at(id)]);
                if (owners_count[id] > 1) {
                    msg.shared_ids.push_back(id);
                    shared_by_worker_[k].push_back(id);
                }
            }
            link->send(std::move(msg));
        }
        for (auto& link : links_) expect_ack(*link);
    }

    Message<T> recv_checked(WorkerLink<T>& link) {
        try {
            return link.recv(timeout_ms_);
        } catch (const TimeoutError&) {
            throw std::runtime_error("worker " + std::to_string(link.k) + " timed out");
        }
    }

    void expect_ack(WorkerLink<T>& link) {
        auto msg = recv_checked(link);
        if (!std::holds_alternative<MsgAck<T>>(msg))
            throw ProtocolError("expected ack from worker " + std::to_string(link.k));
    }

    std::uint64_t total_map_bytes() const {
        std::uint64_t total = 0;
        for (const auto& link : links_) {
            total += link->stats().map_bytes_sent + link->stats().map_bytes_recv;
        }
        return total;
    }

    TrainConfig config_;
    RenderOptions options_;
    int timeout_ms_;
    std::vector<std::unique_ptr<WorkerLink<T>>> links_;
    PartitionTable<T> table_;
    std::vector<std::vector<SplatId>> shared_by_worker_;
    std::vector<SplatId> id_checksum_;
    std::uint64_t next_view_ = 0;
    std::uint64_t epoch_ = 0;
    std::uint64_t adam_step_ = 0;
};

}  // namespace dgs
