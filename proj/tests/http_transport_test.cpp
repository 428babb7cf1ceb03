#include "featflow/autointerp.hpp"

#include <gtest/gtest.h>

#include <atomic>
#include <cstdlib>
#include <thread>

#define CPPHTTPLIB_OPENSSL_SUPPORT
#include <httplib.h>

namespace featflow::autointerp {
namespace {

class LocalProvider : public ::testing::Test {
 protected:
  void SetUp() override {
    server_.Post("/v1/chat/completions", [this](const httplib::Request& req, httplib::Response& res) {
      ++hits_;
      last_auth_ = req.get_header_value("Authorization");
      last_body_ = req.body;
      if (fail_first_ > 0) {
        --fail_first_;
        res.status = 503;
        return;
      }
      if (reject_) {
        res.status = 401;
        res.set_content("bad key", "text/plain");
        return;
      }
      res.set_content(R"({"model":"local","choices":[{"message":{"content":"ok"}}]})",
                      "application/json");
    });
    port_ = server_.bind_to_any_port("127.0.0.1");
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
    setenv("FEATFLOW_TEST_KEY", "sekrit", 1);
  }
  void TearDown() override {
    server_.stop();
    thread_.join();
  }
  HttpSettings settings() const {
    HttpSettings s;
    s.base_url = "http://127.0.0.1:" + std::to_string(port_) + "/v1/";
    s.api_key_env = "FEATFLOW_TEST_KEY";
    s.timeout = std::chrono::seconds(5);
    return s;
  }
  Client client(int max_retries = 4) {
    ClientSettings c;
    c.mode = ClientMode::kLive;
    c.model = "local";
    c.max_retries = max_retries;
    c.backoff = std::chrono::milliseconds(0);
    return Client(c, make_http_transport(settings()), nullptr);
  }

  httplib::Server server_;
  std::thread thread_;
  int port_ = 0;
  std::atomic<int> hits_{0};
  std::atomic<int> fail_first_{0};
  std::atomic<bool> reject_{false};
  std::string last_auth_;
  std::string last_body_;
};

TEST_F(LocalProvider, SendsBearerKeyAndBody) {
  auto c = client();
  ChatRequest req{"local", {{"user", "hi"}}};
  EXPECT_EQ(c.complete(req).content, "ok");
  EXPECT_EQ(last_auth_, "Bearer sekrit");
  EXPECT_EQ(last_body_, req.to_json());
}

TEST_F(LocalProvider, RetriesServerErrors) {
  fail_first_ = 2;
  auto c = client();
  EXPECT_EQ(c.complete(ChatRequest{"local", {{"user", "hi"}}}).content, "ok");
  EXPECT_EQ(hits_, 3);
}

TEST_F(LocalProvider, ClientErrorsAreNotRetried) {
  reject_ = true;
  auto c = client();
  try {
    c.complete(ChatRequest{"local", {{"user", "hi"}}});
    FAIL();
  } catch (const ProviderError& e) {
    EXPECT_FALSE(e.retriable());
    EXPECT_NE(std::string(e.what()).find("401"), std::string::npos);
  }
  EXPECT_EQ(hits_, 1);
}

TEST_F(LocalProvider, MissingKeyIsConfigError) {
  unsetenv("FEATFLOW_TEST_KEY");
  EXPECT_THROW(make_http_transport(settings()), ConfigError);
}

TEST(HttpTransportTest, UnreachableHostIsRetriable) {
  setenv("FEATFLOW_TEST_KEY", "k", 1);
  HttpSettings s;
  s.base_url = "http://127.0.0.1:1";
  s.api_key_env = "FEATFLOW_TEST_KEY";
  s.timeout = std::chrono::seconds(1);
  auto t = make_http_transport(s);
  try {
    t->post("{}");
    FAIL();
  } catch (const ProviderError& e) {
    EXPECT_TRUE(e.retriable());
  }
}

}  // namespace
}  // namespace featflow::autointerp
