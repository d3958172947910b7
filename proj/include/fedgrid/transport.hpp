#pragma once

#include <condition_variable>
#include <cstdint>
#include <cstring>
#include <deque>
#include <memory>
#include <mutex>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <arpa/inet.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <sys/socket.h>
#include <unistd.h>

#include "fedgrid/codec.hpp"

// Two interchangeable message transports: an in-process queue pair (the
// default for simulation) and a stream-socket transport speaking the frame
// format. Both deliver messages ordered, reliable, exactly once.

namespace fedgrid::fed {

class MessageChannel {
public:
    virtual ~MessageChannel() = default;
    virtual void send(const RoundMessage& msg) = 0;
    virtual RoundMessage recv() = 0; // blocks
};

// ---------------------------------------------------------------------------
// In-process pipe: two endpoints over a pair of locked queues.

namespace detail {

struct MsgQueue {
    std::mutex mu;
    std::condition_variable cv;
    std::deque<RoundMessage> items;
    bool closed = false;

    void push(RoundMessage m) {
        {
            std::lock_guard lk(mu);
            if (closed) throw std::runtime_error("inproc pipe: peer endpoint destroyed");
            items.push_back(std::move(m));
        }
        cv.notify_one();
    }

    RoundMessage pop() {
        std::unique_lock lk(mu);
        cv.wait(lk, [&] { return !items.empty() || closed; });
        if (items.empty()) throw std::runtime_error("inproc pipe: peer endpoint destroyed");
        RoundMessage m = std::move(items.front());
        items.pop_front();
        return m;
    }

    void close() {
        {
            std::lock_guard lk(mu);
            closed = true;
        }
        cv.notify_all();
    }
};

} // namespace detail

class InProcEndpoint final : public MessageChannel {
public:
    InProcEndpoint(std::shared_ptr<detail::MsgQueue> out, std::shared_ptr<detail::MsgQueue> in)
        : out_(std::move(out)), in_(std::move(in)) {}
    ~InProcEndpoint() override {
        if (out_) out_->close();
        if (in_) in_->close();
    }

    void send(const RoundMessage& msg) override { out_->push(msg); }
    RoundMessage recv() override { return in_->pop(); }

private:
    std::shared_ptr<detail::MsgQueue> out_;
    std::shared_ptr<detail::MsgQueue> in_;
};

inline std::pair<std::unique_ptr<MessageChannel>, std::unique_ptr<MessageChannel>> make_inproc_pipe() {
    auto a = std::make_shared<detail::MsgQueue>();
    auto b = std::make_shared<detail::MsgQueue>();
    return {std::make_unique<InProcEndpoint>(a, b), std::make_unique<InProcEndpoint>(b, a)};
}

// ---------------------------------------------------------------------------
// Stream sockets: one frame per message over TCP.

namespace detail {

class Fd {
public:
    Fd() = default;
    explicit Fd(int fd) : fd_(fd) {}
    Fd(Fd&& o) noexcept : fd_(o.fd_) { o.fd_ = -1; }
    Fd& operator=(Fd&& o) noexcept {
        if (this != &o) {
            reset();
            fd_ = o.fd_;
            o.fd_ = -1;
        }
        return *this;
    }
    Fd(const Fd&) = delete;
    Fd& operator=(const Fd&) = delete;
    ~Fd() { reset(); }

    int get() const { return fd_; }
    bool valid() const { return fd_ >= 0; }
    void reset() {
        if (fd_ >= 0) ::close(fd_);
        fd_ = -1;
    }

private:
    int fd_ = -1;
};

inline void write_all(int fd, const std::uint8_t* data, std::size_t n) {
    while (n > 0) {
        const ssize_t w = ::write(fd, data, n);
        if (w < 0) throw std::runtime_error("socket: write failed: " + std::string(std::strerror(errno)));
        data += w;
        n -= static_cast<std::size_t>(w);
    }
}

inline void read_all(int fd, std::uint8_t* data, std::size_t n) {
    while (n > 0) {
        const ssize_t r = ::read(fd, data, n);
        if (r < 0) throw std::runtime_error("socket: read failed: " + std::string(std::strerror(errno)));
        if (r == 0) throw TruncatedFrameError("socket: connection closed mid-frame");
        data += r;
        n -= static_cast<std::size_t>(r);
    }
}

} // namespace detail

class SocketChannel final : public MessageChannel {
public:
    explicit SocketChannel(detail::Fd fd) : fd_(std::move(fd)) {}

    void send(const RoundMessage& msg) override {
        const auto bytes = encode(msg);
        detail::write_all(fd_.get(), bytes.data(), bytes.size());
    }

    RoundMessage recv() override {
        std::vector<std::uint8_t> frame(kHeaderBytes);
        detail::read_all(fd_.get(), frame.data(), kHeaderBytes);
        if (detail::get_u32(frame.data()) != kMagic)
            throw BadMagicError("socket: stream does not start with a frame magic");
        const std::uint32_t len = detail::get_u32(frame.data() + 13);
        if (len > kMaxPayloadElems)
            throw MalformedFrameError("socket: declared payload exceeds element cap");
        frame.resize(frame_size(len));
        detail::read_all(fd_.get(), frame.data() + kHeaderBytes, frame.size() - kHeaderBytes);
        return decode(frame);
    }

private:
    detail::Fd fd_;
};

// Listens on host:port; accept() yields one SocketChannel per client.
class SocketListener {
public:
    explicit SocketListener(const std::string& host = "127.0.0.1", std::uint16_t port = 0) {
        detail::Fd fd(::socket(AF_INET, SOCK_STREAM, 0));
        if (!fd.valid()) throw std::runtime_error("socket: cannot create listener");
        const int one = 1;
        ::setsockopt(fd.get(), SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
        sockaddr_in addr{};
        addr.sin_family = AF_INET;
        addr.sin_port = htons(port);
        if (::inet_pton(AF_INET, host.c_str(), &addr.sin_addr) != 1)
            throw std::invalid_argument("socket: bad listen address " + host);
        if (::bind(fd.get(), reinterpret_cast<sockaddr*>(&addr), sizeof addr) != 0)
            throw std::runtime_error("socket: bind failed: " + std::string(std::strerror(errno)));
        if (::listen(fd.get(), 64) != 0)
            throw std::runtime_error("socket: listen failed: " + std::string(std::strerror(errno)));
        socklen_t alen = sizeof addr;
        if (::getsockname(fd.get(), reinterpret_cast<sockaddr*>(&addr), &alen) != 0)
            throw std::runtime_error("socket: getsockname failed");
        port_ = ntohs(addr.sin_port);
        fd_ = std::move(fd);
    }

    std::uint16_t port() const { return port_; }

    std::unique_ptr<SocketChannel> accept() {
        const int cfd = ::accept(fd_.get(), nullptr, nullptr);
        if (cfd < 0) throw std::runtime_error("socket: accept failed: " + std::string(std::strerror(errno)));
        const int one = 1;
        ::setsockopt(cfd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
        return std::make_unique<SocketChannel>(detail::Fd(cfd));
    }

private:
    detail::Fd fd_;
    std::uint16_t port_ = 0;
};

inline std::unique_ptr<SocketChannel> socket_connect(const std::string& host, std::uint16_t port) {
    detail::Fd fd(::socket(AF_INET, SOCK_STREAM, 0));
    if (!fd.valid()) throw std::runtime_error("socket: cannot create socket");
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_port = htons(port);
    if (::inet_pton(AF_INET, host.c_str(), &addr.sin_addr) != 1)
        throw std::invalid_argument("socket: bad address " + host);
    if (::connect(fd.get(), reinterpret_cast<sockaddr*>(&addr), sizeof addr) != 0)
        throw std::runtime_error("socket: connect to " + host + ":" + std::to_string(port) +
                                 " failed: " + std::strerror(errno));
    const int one = 1;
    ::setsockopt(fd.get(), IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
    return std::make_unique<SocketChannel>(std::move(fd));
}

} // namespace fedgrid::fed
