#pragma once

#include "dgs/engine.hpp"
#include "dgs/optim.hpp"

#include <bit>
#include <cerrno>
#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <cstring>
#include <deque>
#include <mutex>
#include <optional>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include <poll.h>
#include <unistd.h>

namespace dgs {

struct ProtocolError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct TimeoutError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Message set. One struct per protocol event; Message is the tagged union.
// ---------------------------------------------------------------------------

/// Splat parameters plus optimizer moments; the unit of migration.
template <typename T>
struct SplatPack {
    Splat<T> splat;
    AdamMoments<T> moments;
};

template <typename T>
struct MsgAck {
    std::uint64_t ref_seq = 0;
    int k = -1;
};

template <typename T>
struct MsgRenderTask {
    std::uint64_t view_id = 0;
    std::uint64_t epoch = 0;
    Camera<T> camera;
    RenderOptions options;
};

template <typename T>
struct MsgPartialResult {
    std::uint64_t view_id = 0;
    int k = -1;
    Image<T> color;
    Image<T> transmittance;
    double compute_ms = 0;
    std::uint64_t contributions = 0;
};

template <typename T>
struct MsgBackwardTask {
    std::uint64_t view_id = 0;
    Image<T> grad_color;
    Image<T> grad_transmittance;
};

template <typename T>
struct GradEntry {
    SplatId id = 0;
    Vec3<T> d_mu = Vec3<T>::Zero();
    Vec3<T> d_log_scale = Vec3<T>::Zero();
    Vec4<T> d_rotation = Vec4<T>::Zero();
    T d_opacity = T(0);
    std::vector<Vec3<T>> d_sh;
};

/// Shared-primitive gradients: worker -> manager carries the local sums,
/// manager -> worker the reduced ones.
template <typename T>
struct MsgGradSync {
    std::uint64_t view_id = 0;
    std::vector<GradEntry<T>> grads;
};

template <typename T>
struct MsgRepartition {
    std::uint64_t epoch = 0;
    int k = -1;
    std::uint64_t adam_step = 0;
    TrainConfig config;
    Subspace<T> subspace;
    std::vector<SplatId> shared_ids;  // members also owned elsewhere
    std::vector<SplatPack<T>> splats;
};

template <typename T>
struct MsgCheckpoint {
    std::string path;
};

template <typename T>
struct MsgSnapshot {};

template <typename T>
struct MsgSnapshotResult {
    int k = -1;
    std::uint64_t adam_step = 0;
    std::vector<SplatPack<T>> splats;
};

template <typename T>
struct MsgShutdown {};

template <typename T>
using Message = std::variant<MsgAck<T>, MsgRenderTask<T>, MsgPartialResult<T>, MsgBackwardTask<T>,
                             MsgGradSync<T>, MsgRepartition<T>, MsgCheckpoint<T>, MsgSnapshot<T>,
                             MsgSnapshotResult<T>, MsgShutdown<T>>;

// ---------------------------------------------------------------------------
// Wire format (see PROTOCOL.md): u32le length prefix, then
// version byte | type byte | scalar width byte | flags | u64le seq | payload.
// partial/backward map sections are row-major scalars and are the bytes the
// communication model accounts for.
// ---------------------------------------------------------------------------

namespace wire {

inline constexpr std::uint8_t kVersion = 1;

enum class MsgType : std::uint8_t {
    kAck = 0,
    kRenderTask = 1,
    kPartialResult = 2,
    kBackwardTask = 3,
    kGradSync = 4,
    kRepartition = 5,
    kCheckpoint = 6,
    kSnapshot = 7,
    kSnapshotResult = 8,
    kShutdown = 9,
};

class Writer {
  public:
    std::vector<std::uint8_t> buf;

    void u8(std::uint8_t v) { buf.push_back(v); }
    void u32(std::uint32_t v) {
        for (int i = 0; i < 4; ++i) buf.push_back(std::uint8_t(v >> (8 * i)));
    }
    void i32(std::int32_t v) { u32(std::uint32_t(v)); }
    void u64(std::uint64_t v) {
        for (int i = 0; i < 8; ++i) buf.push_back(std::uint8_t(v >> (8 * i)));
    }
    void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
    void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
    template <typename T>
    void scalar(T v) {
        if constexpr (sizeof(T) == 4) f32(float(v));
        else f64(double(v));
    }
    template <typename T>
    void scalars(const T* p, std::size_t n) {
        for (std::size_t i = 0; i < n; ++i) scalar(p[i]);
    }
};

class Reader {
  public:
    Reader(const std::uint8_t* p, std::size_t n) : p_(p), end_(p + n) {}

    std::uint8_t u8() { return *take(1); }
    std::uint32_t u32() {
        const std::uint8_t* b = take(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= std::uint32_t(b[i]) << (8 * i);
        return v;
    }
    std::int32_t i32() { return std::int32_t(u32()); }
    std::uint64_t u64() {
        const std::uint8_t* b = take(8);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= std::uint64_t(b[i]) << (8 * i);
        return v;
    }
    double f64() { return std::bit_cast<double>(u64()); }
    float f32() { return std::bit_cast<float>(u32()); }
    template <typename T>
    T scalar() {
        if constexpr (sizeof(T) == 4) return T(f32());
        else return T(f64());
    }
    template <typename T>
    void scalars(T* p, std::size_t n) {
        for (std::size_t i = 0; i < n; ++i) p[i] = scalar<T>();
    }
    bool done() const { return p_ == end_; }

  private:
    const std::uint8_t* take(std::size_t n) {
        if (p_ + n > end_) throw ProtocolError("frame truncated");
        const std::uint8_t* r = p_;
        p_ += n;
        return r;
    }
    const std::uint8_t *p_, *end_;
};

template <typename T>
void put_image(Writer& w, const Image<T>& img) {
    w.scalars(img.data.data(), img.data.size());
}

template <typename T>
Image<T> get_image(Reader& r, int width, int height, int channels) {
    Image<T> img(width, height, channels);
    r.scalars(img.data.data(), img.data.size());
    return img;
}

inline void put_options(Writer& w, const RenderOptions& o) {
    w.f64(o.truncation_radius);
    w.f64(o.near_plane);
    w.f64(o.sigma_clamp);
    w.f64(o.cov2d_regularization);
    w.f64(o.stop_threshold);
    w.i32(o.sh_degree);
    w.u8(o.indicator_enabled ? 1 : 0);
    w.u8(o.camera_z_order ? 1 : 0);
}

inline RenderOptions get_options(Reader& r) {
    RenderOptions o;
    o.truncation_radius = r.f64();
    o.near_plane = r.f64();
    o.sigma_clamp = r.f64();
    o.cov2d_regularization = r.f64();
    o.stop_threshold = r.f64();
    o.sh_degree = r.i32();
    o.indicator_enabled = r.u8() != 0;
    o.camera_z_order = r.u8() != 0;
    return o;
}

template <typename T>
void put_camera(Writer& w, const Camera<T>& c) {
    w.i32(c.width);
    w.i32(c.height);
    w.f64(double(c.fx));
    w.f64(double(c.fy));
    w.f64(double(c.cx));
    w.f64(double(c.cy));
    for (int i = 0; i < 4; ++i) w.f64(double(c.q_wc[i]));
    for (int i = 0; i < 3; ++i) w.f64(double(c.t_wc[i]));
}

template <typename T>
Camera<T> get_camera(Reader& r) {
    Camera<T> c;
    c.width = r.i32();
    c.height = r.i32();
    c.fx = T(r.f64());
    c.fy = T(r.f64());
    c.cx = T(r.f64());
    c.cy = T(r.f64());
    for (int i = 0; i < 4; ++i) c.q_wc[i] = T(r.f64());
    for (int i = 0; i < 3; ++i) c.t_wc[i] = T(r.f64());
    return c;
}

inline void put_config(Writer& w, const TrainConfig& c) {
    w.u64(c.iterations);
    w.i32(c.batch_size);
    w.f64(c.lambda_ssim);
    w.f64(c.lr_position_start);
    w.f64(c.lr_position_end);
    w.f64(c.lr_sh_dc);
    w.f64(c.lr_sh_rest);
    w.f64(c.lr_opacity);
    w.f64(c.lr_scale);
    w.f64(c.lr_rotation);
    w.f64(c.adam_beta1);
    w.f64(c.adam_beta2);
    w.f64(c.adam_eps);
    w.i32(c.kd_depth);
    w.u64(c.repartition_interval);
    w.u8(c.grad_sync ? 1 : 0);
    w.u8(c.deterministic ? 1 : 0);
    w.u64(c.seed);
}

inline TrainConfig get_config(Reader& r) {
    TrainConfig c;
    c.iterations = r.u64();
    c.batch_size = r.i32();
    c.lambda_ssim = r.f64();
    c.lr_position_start = r.f64();
    c.lr_position_end = r.f64();
    c.lr_sh_dc = r.f64();
    c.lr_sh_rest = r.f64();
    c.lr_opacity = r.f64();
    c.lr_scale = r.f64();
    c.lr_rotation = r.f64();
    c.adam_beta1 = r.f64();
    c.adam_beta2 = r.f64();
    c.adam_eps = r.f64();
    c.kd_depth = r.i32();
    c.repartition_interval = r.u64();
    c.grad_sync = r.u8() != 0;
    c.deterministic = r.u8() != 0;
    c.seed = r.u64();
    return c;
}

template <typename T>
void put_param_block(Writer& w, const ParamBlock<T>& b) {
    w.scalars(b.mu.data(), 3);
    w.scalars(b.log_scale.data(), 3);
    w.scalars(b.rotation.data(), 4);
    w.scalar(b.opacity);
    w.u32(std::uint32_t(b.sh.size()));
    for (const auto& v : b.sh) w.scalars(v.data(), 3);
}

template <typename T>
ParamBlock<T> get_param_block(Reader& r) {
    ParamBlock<T> b;
    r.scalars(b.mu.data(), 3);
    r.scalars(b.log_scale.data(), 3);
    r.scalars(b.rotation.data(), 4);
    b.opacity = r.template scalar<T>();
    b.sh.resize(r.u32());
    for (auto& v : b.sh) r.scalars(v.data(), 3);
    return b;
}

template <typename T>
void put_splat_pack(Writer& w, const SplatPack<T>& p) {
    w.u64(p.splat.id);
    w.scalars(p.splat.mu.data(), 3);
    w.scalars(p.splat.log_scale.data(), 3);
    w.scalars(p.splat.rotation.data(), 4);
    w.scalar(p.splat.opacity_logit);
    w.u32(std::uint32_t(p.splat.sh.size()));
    for (const auto& v : p.splat.sh) w.scalars(v.data(), 3);
    put_param_block(w, p.moments.m);
    put_param_block(w, p.moments.v);
}

template <typename T>
SplatPack<T> get_splat_pack(Reader& r) {
    SplatPack<T> p;
    p.splat.id = r.u64();
    r.scalars(p.splat.mu.data(), 3);
    r.scalars(p.splat.log_scale.data(), 3);
    r.scalars(p.splat.rotation.data(), 4);
    p.splat.opacity_logit = r.template scalar<T>();
    p.splat.sh.resize(r.u32());
    for (auto& v : p.splat.sh) r.scalars(v.data(), 3);
    p.moments.m = get_param_block<T>(r);
    p.moments.v = get_param_block<T>(r);
    return p;
}

template <typename T>
void put_subspace(Writer& w, const Subspace<T>& s) {
    w.i32(s.k);
    w.u32(std::uint32_t(s.planes.size()));
    for (const auto& p : s.planes) {
        for (int i = 0; i < 3; ++i) w.f64(double(p.n[i]));
        w.f64(double(p.d));
        w.u8(p.closed ? 1 : 0);
    }
}

template <typename T>
Subspace<T> get_subspace(Reader& r) {
    Subspace<T> s;
    s.k = r.i32();
    s.planes.resize(r.u32());
    for (auto& p : s.planes) {
        for (int i = 0; i < 3; ++i) p.n[i] = T(r.f64());
        p.d = T(r.f64());
        p.closed = r.u8() != 0;
    }
    return s;
}

}  // namespace wire

/// Transport accounting. map_bytes covers only the C/T (or gradient) map
/// sections of partial results and backward tasks — the payload the
/// communication model predicts.
struct LinkStats {
    std::uint64_t frames_sent = 0, bytes_sent = 0, map_bytes_sent = 0;
    std::uint64_t frames_recv = 0, bytes_recv = 0, map_bytes_recv = 0;

    void add_sent(std::uint64_t bytes, std::uint64_t map_bytes) {
        ++frames_sent;
        bytes_sent += bytes;
        map_bytes_sent += map_bytes;
    }
    void add_recv(std::uint64_t bytes, std::uint64_t map_bytes) {
        ++frames_recv;
        bytes_recv += bytes;
        map_bytes_recv += map_bytes;
    }
};

/// Encode a message body (without the length prefix). Returns the map-section
/// byte count for accounting.
template <typename T>
std::uint64_t encode_message(const Message<T>& msg, std::uint64_t seq, std::vector<std::uint8_t>& out) {
    using namespace wire;
    Writer w;
    w.u8(kVersion);
    w.u8(std::uint8_t(msg.index()));
    w.u8(std::uint8_t(sizeof(T)));
    w.u8(0);
    w.u64(seq);
    std::uint64_t map_bytes = 0;

    std::visit(
        [&](const auto& m) {
            using M = std::decay_t<decltype(m)>;
            if constexpr (std::is_same_v<M, MsgAck<T>>) {
                w.u64(m.ref_seq);
                w.i32(m.k);
            } else if constexpr (std::is_same_v<M, MsgRenderTask<T>>) {
                w.u64(m.view_id);
                w.u64(m.epoch);
                put_camera(w, m.camera);
                put_options(w, m.options);
            } else if constexpr (std::is_same_v<M, MsgPartialResult<T>>) {
                w.u64(m.view_id);
                w.i32(m.k);
                w.i32(m.color.width);
                w.i32(m.color.height);
                put_image(w, m.color);
                put_image(w, m.transmittance);
                map_bytes = std::uint64_t(m.color.data.size() + m.transmittance.data.size()) * sizeof(T);
                w.f64(m.compute_ms);
                w.u64(m.contributions);
            } else if constexpr (std::is_same_v<M, MsgBackwardTask<T>>) {
                w.u64(m.view_id);
                w.i32(m.grad_color.width);
                w.i32(m.grad_color.height);
                put_image(w, m.grad_color);
                put_image(w, m.grad_transmittance);
                map_bytes = std::uint64_t(m.grad_color.data.size() + m.grad_transmittance.data.size()) *
                            sizeof(T);
            } else if constexpr (std::is_same_v<M, MsgGradSync<T>>) {
                w.u64(m.view_id);
                w.u32(std::uint32_t(m.grads.size()));
                for (const auto& g : m.grads) {
                    w.u64(g.id);
                    w.scalars(g.d_mu.data(), 3);
                    w.scalars(g.d_log_scale.data(), 3);
                    w.scalars(g.d_rotation.data(), 4);
                    w.scalar(g.d_opacity);
                    w.u32(std::uint32_t(g.d_sh.size()));
                    for (const auto& v : g.d_sh) w.scalars(v.data(), 3);
                }
            } else if constexpr (std::is_same_v<M, MsgRepartition<T>>) {
                w.u64(m.epoch);
                w.i32(m.k);
                w.u64(m.adam_step);
                put_config(w, m.config);
                put_subspace(w, m.subspace);
                w.u32(std::uint32_t(m.shared_ids.size()));
                for (SplatId id : m.shared_ids) w.u64(id);
                w.u32(std::uint32_t(m.splats.size()));
                for (const auto& p : m.splats) put_splat_pack(w, p);
            } else if constexpr (std::is_same_v<M, MsgCheckpoint<T>>) {
                w.u32(std::uint32_t(m.path.size()));
                for (char c : m.path) w.u8(std::uint8_t(c));
            } else if constexpr (std::is_same_v<M, MsgSnapshotResult<T>>) {
                w.i32(m.k);
                w.u64(m.adam_step);
                w.u32(std::uint32_t(m.splats.size()));
                for (const auto& p : m.splats) put_splat_pack(w, p);
            }
            // MsgSnapshot / MsgShutdown: empty payloads.
        },
        msg);
    out = std::move(w.buf);
    return map_bytes;
}

template <typename T>
std::pair<Message<T>, std::uint64_t> decode_message(const std::uint8_t* data, std::size_t size,
                                                    std::uint64_t* map_bytes_out = nullptr) {
    using namespace wire;
    Reader r(data, size);
    if (r.u8() != kVersion) throw ProtocolError("unsupported protocol version");
    const std::uint8_t type = r.u8();
    const std::uint8_t width = r.u8();
    if (width != sizeof(T)) throw ProtocolError("scalar width mismatch");
    r.u8();  // flags
    const std::uint64_t seq = r.u64();
    std::uint64_t map_bytes = 0;

    Message<T> msg;
    switch (MsgType(type)) {
        case MsgType::kAck: {
            MsgAck<T> m;
            m.ref_seq = r.u64();
            m.k = r.i32();
            msg = std::move(m);
            break;
        }
        case MsgType::kRenderTask: {
            MsgRenderTask<T> m;
            m.view_id = r.u64();
            m.epoch = r.u64();
            m.camera = get_camera<T>(r);
            m.options = get_options(r);
            msg = std::move(m);
            break;
        }
        case MsgType::kPartialResult: {
            MsgPartialResult<T> m;
            m.view_id = r.u64();
            m.k = r.i32();
            const int w0 = r.i32(), h0 = r.i32();
            m.color = get_image<T>(r, w0, h0, 3);
            m.transmittance = get_image<T>(r, w0, h0, 1);
            map_bytes = std::uint64_t(m.color.data.size() + m.transmittance.data.size()) * sizeof(T);
            m.compute_ms = r.f64();
            m.contributions = r.u64();
            msg = std::move(m);
            break;
        }
        case MsgType::kBackwardTask: {
            MsgBackwardTask<T> m;
            m.view_id = r.u64();
            const int w0 = r.i32(), h0 = r.i32();
            m.grad_color = get_image<T>(r, w0, h0, 3);
            m.grad_transmittance = get_image<T>(r, w0, h0, 1);
            map_bytes = std::uint64_t(m.grad_color.data.size() + m.grad_transmittance.data.size()) *
                        sizeof(T);
            msg = std::move(m);
            break;
        }
        case MsgType::kGradSync: {
            MsgGradSync<T> m;
            m.view_id = r.u64();
            m.grads.resize(r.u32());
            for (auto& g : m.grads) {
                g.id = r.u64();
                r.scalars(g.d_mu.data(), 3);
                r.scalars(g.d_log_scale.data(), 3);
                r.scalars(g.d_rotation.data(), 4);
                g.d_opacity = r.template scalar<T>();
                g.d_sh.resize(r.u32());
                for (auto& v : g.d_sh) r.scalars(v.data(), 3);
            }
            msg = std::move(m);
            break;
        }
        case MsgType::kRepartition: {
            MsgRepartition<T> m;
            m.epoch = r.u64();
            m.k = r.i32();
            m.adam_step = r.u64();
            m.config = get_config(r);
            m.subspace = get_subspace<T>(r);
            m.shared_ids.resize(r.u32());
            for (auto& id : m.shared_ids) id = r.u64();
            m.splats.resize(r.u32());
            for (auto& p : m.splats) p = get_splat_pack<T>(r);
            msg = std::move(m);
            break;
        }
        case MsgType::kCheckpoint: {
            MsgCheckpoint<T> m;
            const std::uint32_t n = r.u32();
            m.path.resize(n);
            for (auto& c : m.path) c = char(r.u8());
            msg = std::move(m);
            break;
        }
        case MsgType::kSnapshot:
            msg = MsgSnapshot<T>{};
            break;
        case MsgType::kSnapshotResult: {
            MsgSnapshotResult<T> m;
            m.k = r.i32();
            m.adam_step = r.u64();
            m.splats.resize(r.u32());
            for (auto& p : m.splats) p = get_splat_pack<T>(r);
            msg = std::move(m);
            break;
        }
        case MsgType::kShutdown:
            msg = MsgShutdown<T>{};
            break;
        default:
            throw ProtocolError("unknown message type " + std::to_string(int(type)));
    }
    if (map_bytes_out) *map_bytes_out = map_bytes;
    return {std::move(msg), seq};
}

// ---------------------------------------------------------------------------
// Channels.
// ---------------------------------------------------------------------------

/// Length-prefixed frames over a pair of file descriptors.
class FrameChannel {
  public:
    FrameChannel(int fd_in, int fd_out) : fd_in_(fd_in), fd_out_(fd_out) {}
    FrameChannel(const FrameChannel&) = delete;
    FrameChannel& operator=(const FrameChannel&) = delete;
    ~FrameChannel() {
        if (owns_fds_) {
            ::close(fd_in_);
            ::close(fd_out_);
        }
    }

    void own_fds() { owns_fds_ = true; }

    void send(const std::vector<std::uint8_t>& body) {
        std::uint8_t hdr[4];
        const std::uint32_t n = std::uint32_t(body.size());
        for (int i = 0; i < 4; ++i) hdr[i] = std::uint8_t(n >> (8 * i));
        write_exact(hdr, 4);
        write_exact(body.data(), body.size());
    }

    std::vector<std::uint8_t> recv(int timeout_ms = -1) {
        std::uint8_t hdr[4];
        read_exact(hdr, 4, timeout_ms);
        std::uint32_t n = 0;
        for (int i = 0; i < 4; ++i) n |= std::uint32_t(hdr[i]) << (8 * i);
        if (n > (1u << 30)) throw ProtocolError("oversized frame");
        std::vector<std::uint8_t> body(n);
        read_exact(body.data(), n, timeout_ms);
        return body;
    }

  private:
    void write_exact(const std::uint8_t* p, std::size_t n) {
        while (n > 0) {
            const ssize_t r = ::write(fd_out_, p, n);
            if (r < 0) {
                if (errno == EINTR) continue;
                throw ProtocolError("channel write failed");
            }
            p += r;
            n -= std::size_t(r);
        }
    }

    void read_exact(std::uint8_t* p, std::size_t n, int timeout_ms) {
        while (n > 0) {
            if (timeout_ms >= 0) {
                pollfd pfd{fd_in_, POLLIN, 0};
                const int pr = ::poll(&pfd, 1, timeout_ms);
                if (pr == 0) throw TimeoutError("channel read timed out");
                if (pr < 0 && errno != EINTR) throw ProtocolError("poll failed");
                if (pr < 0) continue;
            }
            const ssize_t r = ::read(fd_in_, p, n);
            if (r == 0) throw ProtocolError("channel closed");
            if (r < 0) {
                if (errno == EINTR) continue;
                throw ProtocolError("channel read failed");
            }
            p += r;
            n -= std::size_t(r);
        }
    }

    int fd_in_, fd_out_;
    bool owns_fds_ = false;
};

/// Unbounded thread-safe FIFO for in-process links.
template <typename M>
class MsgQueue {
  public:
    void push(M m) {
        {
            std::lock_guard lk(mu_);
            q_.push_back(std::move(m));
        }
        cv_.notify_one();
    }

    M pop(int timeout_ms = -1) {
        std::unique_lock lk(mu_);
        if (timeout_ms < 0) {
            cv_.wait(lk, [&] { return !q_.empty(); });
        } else {
            if (!cv_.wait_for(lk, std::chrono::milliseconds(timeout_ms), [&] { return !q_.empty(); }))
                throw TimeoutError("queue pop timed out");
        }
        M m = std::move(q_.front());
        q_.pop_front();
        return m;
    }

  private:
    std::mutex mu_;
    std::condition_variable cv_;
    std::deque<M> q_;
};

}  // namespace dgs
