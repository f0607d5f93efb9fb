#include <gtest/gtest.h>

#include <filesystem>
#include <sstream>
#include <thread>

#include <httplib.h>

#include "ffkv/annotation.hpp"
#include "ffkv/error.hpp"
#include "ffkv/io.hpp"
#include "ffkv/server.hpp"
#include "ffkv/values.hpp"
#include "pipeline_fixture.hpp"

namespace ffkv {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;

class ServerTest : public ::testing::Test {
protected:
    static void SetUpTestSuite() {
        fixture_ = new testing::PipelineFixture("server");
        run_pipeline(fixture_->config);
    }
    static void TearDownTestSuite() {
        delete fixture_;
        fixture_ = nullptr;
    }

    void SetUp() override { start(); }
    void TearDown() override { halt(); }

    void start(int port = 0) {
        ServerOptions o;
        o.report = fixture_->config.out;
        o.journal = fixture_->root / "journal.jsonl";
        o.port = port;
        server_ = std::make_unique<WorkbenchServer>(o);
        port_ = server_->bind();
        thread_ = std::thread([this] { server_->listen(); });
        while (!server_->running()) std::this_thread::yield();
        client_ = std::make_unique<httplib::Client>("127.0.0.1", port_);
    }

    void halt() {
        if (server_) server_->stop();
        if (thread_.joinable()) thread_.join();
        client_.reset();
        server_.reset();
    }

    json get_json(const std::string& path, int expect = 200) {
        auto r = client_->Get(path);
        EXPECT_TRUE(r) << path;
        if (!r) return nullptr;
        EXPECT_EQ(r->status, expect) << path << " " << r->body;
        return json::parse(r->body);
    }

    httplib::Result post(const std::string& path, const std::string& body) {
        return client_->Post(path, body, "application/json");
    }

    // Key of the first exported annotation task.
    MemoryCellRef task_key() {
        const auto tasks = json::parse(read_file(fixture_->config.out / artifact_file("tasks")));
        return {tasks[0]["layer"].get<std::size_t>(), tasks[0]["cell"].get<std::size_t>()};
    }

    static std::string path_of(const std::string& kind, const MemoryCellRef& k) {
        return "/api/" + kind + "/" + std::to_string(k.layer) + "/" + std::to_string(k.cell);
    }

    static json annotation_body(const std::string& annotator) {
        AnnotationSet a;
        a.annotator = annotator;
        a.timestamp = "2024-05-01T12:00:00Z";
        a.num_prefixes = 5;
        a.patterns = {{"p1", "starts a verse", PatternClass::shallow}, {"p2", "creation", PatternClass::semantic}};
        a.assignments = {{0, {"p1"}}, {1, {"p1", "p2"}}, {2, {"p1"}}, {4, {"p2"}}};
        json j = to_json(a);
        j.erase("layer");
        j.erase("cell");
        return j;
    }

    static testing::PipelineFixture* fixture_;
    std::unique_ptr<WorkbenchServer> server_;
    std::unique_ptr<httplib::Client> client_;
    std::thread thread_;
    int port_ = 0;
};

testing::PipelineFixture* ServerTest::fixture_ = nullptr;

TEST_F(ServerTest, LayersListing) {
    const json j = get_json("/api/layers");
    EXPECT_EQ(j["n_layers"], 2);
    EXPECT_EQ(j["d_ff"], 16);
    ASSERT_EQ(j["layers"].size(), 2u);
    EXPECT_EQ(j["layers"][0]["task_keys"].size(), 4u);
}

TEST_F(ServerTest, TriggersEqualTheDumpLine) {
    std::istringstream dump(read_file(fixture_->config.out / kTriggersFile));
    std::size_t checked = 0;
    for (std::string line; std::getline(dump, line);) {
        const json rec = json::parse(line);
        const MemoryCellRef k{rec["layer"].get<std::size_t>(), rec["cell"].get<std::size_t>()};
        auto r = client_->Get(path_of("keys", k) + "/triggers");
        ASSERT_TRUE(r);
        EXPECT_EQ(r->status, 200);
        EXPECT_EQ(r->body, line);
        ++checked;
    }
    EXPECT_EQ(checked, 32u);
    get_json("/api/keys/3/0/triggers", 404);
}

TEST_F(ServerTest, ValueTopMatchesDistribution) {
    const Model m = load_checkpoint(fixture_->config.checkpoint).model();
    const json j = get_json("/api/keys/2/5/value-top?k=4");
    const VocabDistribution d = value_distribution(m, {2, 5});
    ASSERT_EQ(j["tokens"].size(), 4u);
    for (std::size_t r = 0; r < 4; ++r) {
        EXPECT_EQ(j["tokens"][r]["token_id"], d.order()[r]);
        EXPECT_FLOAT_EQ(j["tokens"][r]["prob"].get<float>(), d.probs()[d.order()[r]]);
    }
    EXPECT_EQ(get_json("/api/keys/1/0/value-top")["tokens"].size(), 10u);
    get_json("/api/keys/1/0/value-top?k=zero", 400);
    get_json("/api/keys/1/99/value-top", 404);
}

TEST_F(ServerTest, FigureStats) {
    const json fig11 = get_json("/api/stats/fig11");
    EXPECT_EQ(fig11["figure"], "fig11");
    const std::string csv = read_file(fixture_->config.out / artifact_file("fig11"));
    EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 3);
    EXPECT_EQ(get_json("/api/stats/table3")["figure"], "table3");
    get_json("/api/stats/fig99", 404);
}

TEST_F(ServerTest, AnnotationRoundTripAndRestart) {
    const MemoryCellRef k = task_key();
    get_json(path_of("annotations", k), 404);
    const json body = annotation_body("alice");
    auto r = post(path_of("annotations", k), body.dump());
    ASSERT_TRUE(r);
    ASSERT_EQ(r->status, 200) << r->body;
    const json posted = json::parse(r->body);
    const json got = get_json(path_of("annotations", k));
    EXPECT_EQ(got, posted);
    const AnnotationSet back = annotation_from_json(got["annotation"]);
    EXPECT_EQ(back.key, k);
    json expected = body;
    expected["layer"] = k.layer;
    expected["cell"] = k.cell;
    EXPECT_EQ(back, annotation_from_json(expected));

    const json cov = get_json("/api/stats/coverage?layer=" + std::to_string(k.layer) + "&cell=" + std::to_string(k.cell));
    ASSERT_EQ(cov["layers"].size(), 1u);
    // p2 sits on two prefixes, one short of grounded
    EXPECT_EQ(cov["layers"][0]["counts"]["shallow_only"], 3);
    EXPECT_EQ(cov["layers"][0]["counts"]["both"], 0);
    EXPECT_EQ(cov["layers"][0]["counts"]["semantic_only"], 0);
    EXPECT_EQ(cov["layers"][0]["counts"]["not_covered"], 2);

    halt();
    start();
    EXPECT_EQ(get_json(path_of("annotations", k)), posted);
}

TEST_F(ServerTest, ConcurrentPostsLastWriterWins) {
    const MemoryCellRef k = task_key();
    const int n = 16;
    std::vector<std::uint64_t> revisions(n, 0);
    std::vector<std::thread> clients;
    for (int i = 0; i < n; ++i) {
        clients.emplace_back([&, i] {
            httplib::Client c("127.0.0.1", port_);
            auto r = c.Post(path_of("annotations", k), annotation_body("writer-" + std::to_string(i)).dump(),
                            "application/json");
            if (r && r->status == 200) revisions[i] = json::parse(r->body)["revision"].get<std::uint64_t>();
        });
    }
    for (auto& t : clients) t.join();
    std::vector<std::uint64_t> sorted = revisions;
    std::sort(sorted.begin(), sorted.end());
    for (int i = 0; i < n; ++i) EXPECT_NE(sorted[i], 0u);
    EXPECT_EQ(std::unique(sorted.begin(), sorted.end()), sorted.end());
    EXPECT_EQ(sorted.back() - sorted.front(), static_cast<std::uint64_t>(n - 1));
    const auto winner = std::max_element(revisions.begin(), revisions.end()) - revisions.begin();
    const json got = get_json(path_of("annotations", k));
    EXPECT_EQ(got["revision"], sorted.back());
    EXPECT_EQ(got["annotation"]["annotator"], "writer-" + std::to_string(winner));

    std::istringstream journal(read_file(fixture_->root / "journal.jsonl"));
    std::uint64_t prev = 0;
    for (std::string line; std::getline(journal, line);) {
        const auto rev = json::parse(line)["revision"].get<std::uint64_t>();
        EXPECT_GT(rev, prev);
        prev = rev;
    }
}

TEST_F(ServerTest, MalformedPostsAreRejected) {
    const MemoryCellRef k = task_key();
    auto r = post(path_of("annotations", k), "{not json");
    ASSERT_TRUE(r);
    EXPECT_EQ(r->status, 400);
    r = post(path_of("annotations", k), "[1,2]");
    EXPECT_EQ(r->status, 400);
    json wrong = annotation_body("x");
    wrong["layer"] = k.layer + 1;
    EXPECT_EQ(post(path_of("annotations", k), wrong.dump())->status, 400);

    json unknown = annotation_body("x");
    unknown["assignments"]["3"] = {"p9"};
    r = post(path_of("annotations", k), unknown.dump());
    EXPECT_EQ(r->status, 422);
    const json err = json::parse(r->body);
    EXPECT_EQ(err["offending"], json::array({"p9"}));

    json rank = annotation_body("x");
    rank["assignments"]["7"] = {"p1"};
    r = post(path_of("annotations", k), rank.dump());
    EXPECT_EQ(r->status, 422);
    EXPECT_EQ(json::parse(r->body)["offending"], json::array({"7"}));

    json klass = annotation_body("x");
    klass["patterns"][0]["class"] = "deep";
    EXPECT_EQ(post(path_of("annotations", k), klass.dump())->status, 422);
    EXPECT_EQ(post("/api/annotations/9/0", annotation_body("x").dump())->status, 404);
}

TEST_F(ServerTest, PortInUseIsFatal) {
    ServerOptions o;
    o.report = fixture_->config.out;
    o.journal = fixture_->root / "other.jsonl";
    o.port = port_;
    WorkbenchServer second(o);
    try {
        second.bind();
        FAIL() << "expected bind failure";
    } catch (const std::runtime_error& e) {
        EXPECT_NE(std::string(e.what()).find(std::to_string(port_)), std::string::npos);
    }
}

TEST(ServerLoad, MissingReportDirectory) {
    ServerOptions o;
    o.report = fs::temp_directory_path() / "ffkv_no_such_report";
    EXPECT_THROW({ WorkbenchServer s(o); }, InputError);
}

}  // namespace
}  // namespace ffkv
