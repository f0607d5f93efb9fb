#pragma once

#include <filesystem>
#include <memory>
#include <string>

namespace ffkv {

struct ServerOptions {
    std::filesystem::path report;   // directory written by run_pipeline
    std::filesystem::path journal;  // defaults to <report>/annotations.jsonl
    std::filesystem::path checkpoint;  // defaults to the manifest's checkpoint
    std::string host = "127.0.0.1";
    int port = 8080;  // 0 picks a free port
};

/// Local JSON service over a report directory plus the annotation journal.
class WorkbenchServer {
public:
    explicit WorkbenchServer(ServerOptions options);
    ~WorkbenchServer();
    WorkbenchServer(const WorkbenchServer&) = delete;
    WorkbenchServer& operator=(const WorkbenchServer&) = delete;

    /// Binds the socket; throws std::runtime_error when the port is taken.
    /// Returns the bound port.
    int bind();
    /// Serves until stop(); bind() must have succeeded.
    void listen();
    void stop();
    bool running() const;

private:
    struct Impl;
    std::unique_ptr<Impl> impl_;
};

}  // namespace ffkv
