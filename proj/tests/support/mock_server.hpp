#pragma once

// Loopback HTTP server on an ephemeral port, run on a background thread.

#include <functional>
#include <string>
#include <thread>

#include "carmtwin/carmtwin.hpp"

#include <httplib.h>

namespace carmtwin::testing {

class MockServer {
public:
    explicit MockServer(const std::function<void(httplib::Server&)>& setup)
    {
        setup(srv_);
        port_ = srv_.bind_to_any_port("127.0.0.1");
        thread_ = std::thread([this] { srv_.listen_after_bind(); });
        srv_.wait_until_ready();
    }
    ~MockServer()
    {
        srv_.stop();
        thread_.join();
    }
    MockServer(const MockServer&) = delete;
    MockServer& operator=(const MockServer&) = delete;

    int port() const noexcept { return port_; }
    std::string url() const { return "http://127.0.0.1:" + std::to_string(port_); }

private:
    httplib::Server srv_;
    int port_ = 0;
    std::thread thread_;
};

} // namespace carmtwin::testing
