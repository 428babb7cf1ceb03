// Eigen must come first: httplib pulls in <resolv.h>, whose _res macro
// breaks Eigen's product kernels.
#include "featflow/autointerp.hpp"

#include <cstdlib>

#define CPPHTTPLIB_OPENSSL_SUPPORT
#include <httplib.h>

namespace featflow::autointerp {
namespace {

class HttpTransport : public Transport {
 public:
  explicit HttpTransport(const HttpSettings& s) : settings_(s) {
    const auto scheme = s.base_url.find("://");
    if (scheme == std::string::npos) {
      throw ConfigError("provider base URL '" + s.base_url + "' lacks a scheme");
    }
    const auto slash = s.base_url.find('/', scheme + 3);
    host_ = s.base_url.substr(0, slash);
    prefix_ = slash == std::string::npos ? "" : s.base_url.substr(slash);
    while (!prefix_.empty() && prefix_.back() == '/') prefix_.pop_back();
    const char* key = std::getenv(s.api_key_env.c_str());
    if (key == nullptr || *key == '\0') {
      throw ConfigError("live provider calls need an API key in $" + s.api_key_env);
    }
    key_ = key;
  }

  std::string post(const std::string& body) override {
    httplib::Client cli(host_);
    const auto t = static_cast<time_t>(settings_.timeout.count());
    cli.set_connection_timeout(t, 0);
    cli.set_read_timeout(t, 0);
    cli.set_write_timeout(t, 0);
    httplib::Headers headers{{"Authorization", "Bearer " + key_}};
    auto res = cli.Post(prefix_ + settings_.path, headers, body, "application/json");
    if (!res) throw ProviderError("provider request failed: " + httplib::to_string(res.error()), true);
    if (res->status == 429 || res->status >= 500) {
      throw ProviderError("provider returned HTTP " + std::to_string(res->status), true);
    }
    if (res->status != 200) {
      throw ProviderError("provider returned HTTP " + std::to_string(res->status) + ": " + res->body,
                          false);
    }
    return res->body;
  }

 private:
  HttpSettings settings_;
  std::string host_;
  std::string prefix_;
  std::string key_;
};

}  // namespace

std::unique_ptr<Transport> make_http_transport(const HttpSettings& settings) {
  return std::make_unique<HttpTransport>(settings);
}

}  // namespace featflow::autointerp
