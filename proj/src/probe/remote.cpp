#define CPPHTTPLIB_OPENSSL_SUPPORT
#include <httplib.h>

#include "cfaudit/probe/remote.hpp"

#include <algorithm>
#include <cctype>
#include <cstdlib>
#include <ctime>
#include <map>

#include <nlohmann/json.hpp>

#include "cfaudit/digest.hpp"

namespace cfaudit::probe {

using nlohmann::json;

namespace {

std::string env_or(const char* name, const std::string& fallback = {}) {
  const char* v = std::getenv(name);
  return v ? std::string(v) : fallback;
}

std::string require_env(const char* name) {
  std::string v = env_or(name);
  if (v.empty()) throw ConfigError(std::string("environment variable ") + name + " is not set");
  return v;
}

std::string lower(std::string s) {
  for (char& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return s;
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t");
  return s.substr(b, e - b + 1);
}

[[noreturn]] void protocol_error(const std::string& backend, const std::string& what) {
  throw BackendError(BackendError::Reason::kProtocol, backend + ": " + what);
}

json parse_body(const std::string& body, const std::string& backend) {
  try {
    return json::parse(body);
  } catch (const json::exception& e) {
    protocol_error(backend, std::string("response is not JSON: ") + e.what());
  }
}

class HttplibTransport final : public HttpTransport {
 public:
  explicit HttplibTransport(std::chrono::seconds timeout) : timeout_(timeout) {}

  HttpResponse send(const HttpRequest& request) override {
    const UrlParts url = split_url(request.url);
    httplib::Client client(url.scheme + "://" + url.host);
    client.set_connection_timeout(timeout_);
    client.set_read_timeout(timeout_);
    client.set_write_timeout(timeout_);
    httplib::Request req;
    req.method = request.method;
    req.path = url.path + (url.query.empty() ? "" : "?" + url.query);
    for (const auto& [k, v] : request.headers) req.headers.emplace(k, v);
    req.body = request.body;
    auto res = client.send(req);
    if (!res) {
      throw BackendError(BackendError::Reason::kTransport,
                         "request to " + url.host + " failed: " + httplib::to_string(res.error()));
    }
    return HttpResponse{res->status, res->body};
  }

 private:
  std::chrono::seconds timeout_;
};

std::string amz_timestamp(std::chrono::system_clock::time_point tp) {
  const std::time_t t = std::chrono::system_clock::to_time_t(tp);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[20];
  std::strftime(buf, sizeof(buf), "%Y%m%dT%H%M%SZ", &tm);
  return buf;
}

std::string canonical_query(const std::string& query) {
  if (query.empty()) return {};
  std::vector<std::pair<std::string, std::string>> params;
  std::size_t pos = 0;
  while (pos <= query.size()) {
    const auto amp = std::min(query.find('&', pos), query.size());
    const std::string part = query.substr(pos, amp - pos);
    const auto eq = part.find('=');
    if (eq == std::string::npos) {
      params.emplace_back(part, "");
    } else {
      params.emplace_back(part.substr(0, eq), part.substr(eq + 1));
    }
    pos = amp + 1;
  }
  std::sort(params.begin(), params.end());
  std::string out;
  for (const auto& [k, v] : params) {
    if (!out.empty()) out += '&';
    out += k + '=' + v;
  }
  return out;
}

}  // namespace

std::unique_ptr<HttpTransport> make_default_transport(std::chrono::seconds timeout) {
  return std::make_unique<HttplibTransport>(timeout);
}

UrlParts split_url(const std::string& url) {
  UrlParts out;
  const auto scheme_end = url.find("://");
  if (scheme_end == std::string::npos) throw ConfigError("URL without scheme: " + url);
  out.scheme = url.substr(0, scheme_end);
  const auto host_begin = scheme_end + 3;
  const auto path_begin = url.find('/', host_begin);
  const auto query_begin = url.find('?', host_begin);
  const auto host_end = std::min(path_begin, query_begin);
  out.host = url.substr(host_begin, host_end == std::string::npos ? std::string::npos : host_end - host_begin);
  if (out.host.empty()) throw ConfigError("URL without host: " + url);
  if (path_begin != std::string::npos && path_begin < query_begin) {
    out.path = url.substr(path_begin, query_begin == std::string::npos ? std::string::npos
                                                                       : query_begin - path_begin);
  } else {
    out.path = "/";
  }
  if (query_begin != std::string::npos) out.query = url.substr(query_begin + 1);
  return out;
}

void check_status(const HttpResponse& response, const std::string& backend) {
  const int s = response.status;
  if (s >= 200 && s < 300) return;
  const std::string what = backend + " returned HTTP " + std::to_string(s);
  if (s == 429) throw BackendError(BackendError::Reason::kThrottle, what + " (quota exceeded)");
  if (s == 408 || s >= 500) throw BackendError(BackendError::Reason::kTransport, what);
  throw BackendError(BackendError::Reason::kProtocol, what);
}

std::vector<LabelPrediction> RemoteBackend::classify(const ProbeImage& image) {
  const HttpResponse response = transport_->send(build_request(image));
  check_status(response, id());
  return parse_response(response.body);
}

// Google Cloud Vision, images:annotate with LABEL_DETECTION.

GoogleVisionBackend::GoogleVisionBackend(Options options, std::shared_ptr<HttpTransport> transport)
    : RemoteBackend(std::move(transport)), options_(std::move(options)) {
  if (options_.api_key.empty()) throw ConfigError("google backend needs an API key");
}

GoogleVisionBackend::Options GoogleVisionBackend::from_env() {
  Options o;
  o.api_key = require_env("GOOGLE_VISION_API_KEY");
  return o;
}

HttpRequest GoogleVisionBackend::build_request(const ProbeImage& image) const {
  const json body{
      {"requests",
       {{{"image", {{"content", base64_encode(image.png)}}},
         {"features", {{{"type", "LABEL_DETECTION"}, {"maxResults", options_.max_results}}}}}}}};
  return HttpRequest{"POST", options_.endpoint + "?key=" + options_.api_key,
                     {{"Content-Type", "application/json"}}, body.dump()};
}

std::vector<LabelPrediction> GoogleVisionBackend::parse_response(const std::string& body) const {
  const json doc = parse_body(body, id());
  try {
    const auto& first = doc.at("responses").at(0);
    if (first.contains("error")) protocol_error(id(), first.at("error").dump());
    std::vector<LabelPrediction> out;
    if (!first.contains("labelAnnotations")) return out;
    for (const auto& l : first.at("labelAnnotations")) {
      const std::string name = l.at("description");
      out.push_back({name, name, true, l.value("score", 1.0)});
    }
    return out;
  } catch (const json::exception& e) {
    protocol_error(id(), std::string("unexpected response shape: ") + e.what());
  }
}

// Amazon Rekognition DetectLabels over the JSON 1.1 protocol.

RekognitionBackend::RekognitionBackend(Options options, std::shared_ptr<HttpTransport> transport)
    : RemoteBackend(std::move(transport)), options_(std::move(options)) {
  if (options_.access_key.empty() || options_.secret_key.empty()) {
    throw ConfigError("amazon backend needs an access key and secret");
  }
  if (!options_.clock) options_.clock = [] { return std::chrono::system_clock::now(); };
}

RekognitionBackend::Options RekognitionBackend::from_env() {
  Options o;
  o.access_key = require_env("AWS_ACCESS_KEY_ID");
  o.secret_key = require_env("AWS_SECRET_ACCESS_KEY");
  o.session_token = env_or("AWS_SESSION_TOKEN");
  o.region = env_or("AWS_REGION", "us-east-1");
  return o;
}

HttpRequest RekognitionBackend::build_request(const ProbeImage& image) const {
  const std::string host = "rekognition." + options_.region + ".amazonaws.com";
  const json body{{"Image", {{"Bytes", base64_encode(image.png)}}},
                  {"MaxLabels", options_.max_labels},
                  {"MinConfidence", options_.min_confidence}};
  HttpRequest req{"POST", "https://" + host + "/",
                  {{"Content-Type", "application/x-amz-json-1.1"},
                   {"Host", host},
                   {"X-Amz-Date", amz_timestamp(options_.clock())},
                   {"X-Amz-Target", "RekognitionService.DetectLabels"}},
                  body.dump()};
  if (!options_.session_token.empty()) {
    req.headers.emplace_back("X-Amz-Security-Token", options_.session_token);
  }
  const std::string auth =
      sigv4_authorization(req, {options_.access_key, options_.secret_key, options_.session_token},
                          options_.region, "rekognition", req.headers[2].second);
  req.headers.emplace_back("Authorization", auth);
  return req;
}

std::vector<LabelPrediction> RekognitionBackend::parse_response(const std::string& body) const {
  const json doc = parse_body(body, id());
  try {
    std::vector<LabelPrediction> out;
    for (const auto& l : doc.at("Labels")) {
      const std::string name = l.at("Name");
      out.push_back({name, name, true, l.at("Confidence").get<double>() / 100.0});
    }
    return out;
  } catch (const json::exception& e) {
    protocol_error(id(), std::string("unexpected response shape: ") + e.what());
  }
}

// IBM Watson Visual Recognition v3 classify, multipart upload.

WatsonBackend::WatsonBackend(Options options, std::shared_ptr<HttpTransport> transport)
    : RemoteBackend(std::move(transport)), options_(std::move(options)) {
  if (options_.api_key.empty() || options_.service_url.empty()) {
    throw ConfigError("ibm backend needs an API key and service URL");
  }
}

WatsonBackend::Options WatsonBackend::from_env() {
  Options o;
  o.api_key = require_env("IBM_WATSON_APIKEY");
  o.service_url = require_env("IBM_WATSON_URL");
  return o;
}

HttpRequest WatsonBackend::build_request(const ProbeImage& image) const {
  static const std::string kBoundary = "cfaudit-watson-boundary";
  std::string body;
  body += "--" + kBoundary + "\r\n";
  body += "Content-Disposition: form-data; name=\"images_file\"; filename=\"image.png\"\r\n";
  body += "Content-Type: image/png\r\n\r\n";
  body.append(reinterpret_cast<const char*>(image.png.data()), image.png.size());
  body += "\r\n--" + kBoundary + "\r\n";
  body += "Content-Disposition: form-data; name=\"threshold\"\r\n\r\n";
  body += std::to_string(options_.threshold);
  body += "\r\n--" + kBoundary + "--\r\n";
  const std::string credentials = "apikey:" + options_.api_key;
  return HttpRequest{
      "POST",
      options_.service_url + "/v3/classify?version=" + options_.version,
      {{"Authorization",
        "Basic " + base64_encode(std::span<const std::uint8_t>(
                       reinterpret_cast<const std::uint8_t*>(credentials.data()), credentials.size()))},
       {"Content-Type", "multipart/form-data; boundary=" + kBoundary}},
      std::move(body)};
}

std::vector<LabelPrediction> WatsonBackend::parse_response(const std::string& body) const {
  const json doc = parse_body(body, id());
  try {
    std::vector<LabelPrediction> out;
    const auto& img = doc.at("images").at(0);
    if (img.contains("error")) protocol_error(id(), img.at("error").dump());
    for (const auto& clf : img.at("classifiers")) {
      for (const auto& c : clf.at("classes")) {
        const std::string name = c.at("class");
        out.push_back({name, name, true, c.value("score", 1.0)});
      }
    }
    return out;
  } catch (const json::exception& e) {
    protocol_error(id(), std::string("unexpected response shape: ") + e.what());
  }
}

// Clarifai v2 model outputs.

ClarifaiBackend::ClarifaiBackend(Options options, std::shared_ptr<HttpTransport> transport)
    : RemoteBackend(std::move(transport)), options_(std::move(options)) {
  if (options_.api_key.empty()) throw ConfigError("clarifai backend needs an API key");
}

ClarifaiBackend::Options ClarifaiBackend::from_env() {
  Options o;
  o.api_key = require_env("CLARIFAI_API_KEY");
  o.model_id = env_or("CLARIFAI_MODEL_ID", o.model_id);
  return o;
}

HttpRequest ClarifaiBackend::build_request(const ProbeImage& image) const {
  const json body{{"inputs", {{{"data", {{"image", {{"base64", base64_encode(image.png)}}}}}}}}};
  return HttpRequest{"POST",
                     "https://api.clarifai.com/v2/models/" + options_.model_id + "/outputs",
                     {{"Authorization", "Key " + options_.api_key},
                      {"Content-Type", "application/json"}},
                     body.dump()};
}

std::vector<LabelPrediction> ClarifaiBackend::parse_response(const std::string& body) const {
  const json doc = parse_body(body, id());
  try {
    const int code = doc.at("status").at("code");
    if (code != 10000) protocol_error(id(), "status " + std::to_string(code));
    std::vector<LabelPrediction> out;
    for (const auto& c : doc.at("outputs").at(0).at("data").at("concepts")) {
      const std::string name = c.at("name");
      const double v = c.at("value");
      out.push_back({name, name, v >= options_.min_value, v});
    }
    return out;
  } catch (const json::exception& e) {
    protocol_error(id(), std::string("unexpected response shape: ") + e.what());
  }
}

std::string sigv4_signing_key(const std::string& secret, const std::string& date,
                              const std::string& region, const std::string& service) {
  const std::string k_date = hmac_sha256("AWS4" + secret, date);
  const std::string k_region = hmac_sha256(k_date, region);
  const std::string k_service = hmac_sha256(k_region, service);
  return hmac_sha256(k_service, "aws4_request");
}

std::string sigv4_authorization(const HttpRequest& request, const SigV4Credentials& credentials,
                                const std::string& region, const std::string& service,
                                const std::string& amz_date) {
  const UrlParts url = split_url(request.url);
  std::map<std::string, std::string> headers;
  for (const auto& [k, v] : request.headers) {
    auto& slot = headers[lower(k)];
    slot = slot.empty() ? trim(v) : slot + "," + trim(v);
  }
  if (!headers.contains("host")) headers["host"] = url.host;

  std::string canonical_headers;
  std::string signed_headers;
  for (const auto& [k, v] : headers) {
    canonical_headers += k + ":" + v + "\n";
    if (!signed_headers.empty()) signed_headers += ";";
    signed_headers += k;
  }
  const std::string canonical_request = request.method + "\n" + url.path + "\n" +
                                        canonical_query(url.query) + "\n" + canonical_headers +
                                        "\n" + signed_headers + "\n" + sha256_hex(request.body);
  const std::string date = amz_date.substr(0, 8);
  const std::string scope = date + "/" + region + "/" + service + "/aws4_request";
  const std::string to_sign =
      "AWS4-HMAC-SHA256\n" + amz_date + "\n" + scope + "\n" + sha256_hex(canonical_request);
  const std::string signature =
      hmac_sha256_hex(sigv4_signing_key(credentials.secret_key, date, region, service), to_sign);
  return "AWS4-HMAC-SHA256 Credential=" + credentials.access_key + "/" + scope +
         ", SignedHeaders=" + signed_headers + ", Signature=" + signature;
}

}  // namespace cfaudit::probe
