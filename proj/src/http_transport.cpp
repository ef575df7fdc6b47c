#define CPPHTTPLIB_OPENSSL_SUPPORT
#include <httplib.h>

#include <cstdlib>

#include "rankaudit/apiclient.hpp"
#include "rankaudit/errors.hpp"

namespace rankaudit {

HttpChatTransport::HttpChatTransport(EndpointConfig endpoint) : endpoint_(std::move(endpoint)) {
  if (endpoint_.base_url.empty()) throw ConfigError("endpoint.base_url", "is required");
  if (!endpoint_.api_key_env.empty()) {
    const char* key = std::getenv(endpoint_.api_key_env.c_str());
    if (key == nullptr || *key == '\0') {
      throw ConfigError("endpoint.api_key_env",
                        "environment variable " + endpoint_.api_key_env + " is not set");
    }
    auth_header_ = std::string("Bearer ") + key;
  }
}

HttpResult HttpChatTransport::post(const std::string& body) {
  // One client per call: httplib clients are not meant for concurrent use.
  httplib::Client client(endpoint_.base_url);
  const auto timeout = std::chrono::duration<double>(endpoint_.timeout_seconds);
  client.set_connection_timeout(std::chrono::duration_cast<std::chrono::microseconds>(timeout));
  client.set_read_timeout(std::chrono::duration_cast<std::chrono::microseconds>(timeout));
  client.set_write_timeout(std::chrono::duration_cast<std::chrono::microseconds>(timeout));
  httplib::Headers headers;
  if (!auth_header_.empty()) headers.emplace("Authorization", auth_header_);
  auto res = client.Post(endpoint_.path, headers, body, "application/json");
  if (!res) return {0, {}, httplib::to_string(res.error())};
  return {res->status, res->body, {}};
}

}  // namespace rankaudit
