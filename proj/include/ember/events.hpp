#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <mutex>

namespace ember {

/// Multi-subscriber event stream. Events are delivered synchronously, in
/// publish order, to every subscriber registered at publish time.
template <typename T>
class EventStream {
public:
    using Callback = std::function<void(const T&)>;

    std::uint64_t subscribe(Callback cb) {
        std::lock_guard lock(mutex_);
        auto id = nextId_++;
        subscribers_.emplace(id, std::move(cb));
        return id;
    }

    void unsubscribe(std::uint64_t id) {
        std::lock_guard lock(mutex_);
        subscribers_.erase(id);
    }

    void publish(const T& event) {
        std::lock_guard lock(mutex_);
        for (auto& [_, cb] : subscribers_) cb(event);
    }

private:
    // recursive: a subscriber may publish follow-up events
    std::recursive_mutex mutex_;
    std::uint64_t nextId_ = 1;
    std::map<std::uint64_t, Callback> subscribers_;
};

/// RAII subscription handle.
template <typename T>
class Subscription {
public:
    Subscription() = default;
    Subscription(EventStream<T>& stream, typename EventStream<T>::Callback cb)
        : stream_(&stream), id_(stream.subscribe(std::move(cb))) {}
    Subscription(Subscription&& other) noexcept : stream_(other.stream_), id_(other.id_) { other.stream_ = nullptr; }
    Subscription& operator=(Subscription&& other) noexcept {
        if (this != &other) {
            reset();
            stream_ = other.stream_;
            id_ = other.id_;
            other.stream_ = nullptr;
        }
        return *this;
    }
    ~Subscription() { reset(); }

    void reset() {
        if (stream_) stream_->unsubscribe(id_);
        stream_ = nullptr;
    }

private:
    EventStream<T>* stream_ = nullptr;
    std::uint64_t id_ = 0;
};

} // namespace ember
