#pragma once

#include <chrono>
#include <functional>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "cfaudit/probe/probe.hpp"

// Thin protocol translators for hosted label-classification services. Each
// adapter builds one HTTP request per image and maps the vendor response to
// LabelPrediction. Credentials come from environment variables.
namespace cfaudit::probe {

struct HttpRequest {
  std::string method = "POST";
  std::string url;  // scheme://host[:port]/path[?query]
  std::vector<std::pair<std::string, std::string>> headers;
  std::string body;
};

struct HttpResponse {
  int status = 0;
  std::string body;
};

class HttpTransport {
 public:
  virtual ~HttpTransport() = default;
  // Throws BackendError(kTransport) when no response was received.
  virtual HttpResponse send(const HttpRequest& request) = 0;
};

std::unique_ptr<HttpTransport> make_default_transport(std::chrono::seconds timeout = std::chrono::seconds(30));

struct UrlParts {
  std::string scheme;
  std::string host;  // includes ":port" when present
  std::string path;  // begins with '/'
  std::string query;  // without '?'
};
UrlParts split_url(const std::string& url);

// 2xx passes; 429 raises a throttle error; 408 and 5xx raise retryable
// transport errors; everything else is a protocol error.
void check_status(const HttpResponse& response, const std::string& backend);

class RemoteBackend : public Backend {
 public:
  explicit RemoteBackend(std::shared_ptr<HttpTransport> transport)
      : transport_(std::move(transport)) {}

  std::vector<LabelPrediction> classify(const ProbeImage& image) override;

  virtual HttpRequest build_request(const ProbeImage& image) const = 0;
  // Throws BackendError(kProtocol) on malformed bodies.
  virtual std::vector<LabelPrediction> parse_response(const std::string& body) const = 0;

 private:
  std::shared_ptr<HttpTransport> transport_;
};

// GOOGLE_VISION_API_KEY
class GoogleVisionBackend final : public RemoteBackend {
 public:
  struct Options {
    std::string api_key;
    int max_results = 50;
    std::string endpoint = "https://vision.googleapis.com/v1/images:annotate";
  };
  GoogleVisionBackend(Options options, std::shared_ptr<HttpTransport> transport);
  static Options from_env();

  std::string id() const override { return "google"; }
  HttpRequest build_request(const ProbeImage& image) const override;
  std::vector<LabelPrediction> parse_response(const std::string& body) const override;

 private:
  Options options_;
};

// AWS_ACCESS_KEY_ID, AWS_SECRET_ACCESS_KEY, AWS_SESSION_TOKEN (optional),
// AWS_REGION (default us-east-1)
class RekognitionBackend final : public RemoteBackend {
 public:
  struct Options {
    std::string access_key;
    std::string secret_key;
    std::string session_token;
    std::string region = "us-east-1";
    int max_labels = 50;
    double min_confidence = 50.0;
    std::function<std::chrono::system_clock::time_point()> clock;
  };
  RekognitionBackend(Options options, std::shared_ptr<HttpTransport> transport);
  static Options from_env();

  std::string id() const override { return "amazon"; }
  HttpRequest build_request(const ProbeImage& image) const override;
  std::vector<LabelPrediction> parse_response(const std::string& body) const override;

 private:
  Options options_;
};

// IBM_WATSON_APIKEY, IBM_WATSON_URL
class WatsonBackend final : public RemoteBackend {
 public:
  struct Options {
    std::string api_key;
    std::string service_url;
    std::string version = "2018-03-19";
    double threshold = 0.5;
  };
  WatsonBackend(Options options, std::shared_ptr<HttpTransport> transport);
  static Options from_env();

  std::string id() const override { return "ibm"; }
  HttpRequest build_request(const ProbeImage& image) const override;
  std::vector<LabelPrediction> parse_response(const std::string& body) const override;

 private:
  Options options_;
};

// CLARIFAI_API_KEY, CLARIFAI_MODEL_ID (default general-image-recognition)
class ClarifaiBackend final : public RemoteBackend {
 public:
  struct Options {
    std::string api_key;
    std::string model_id = "general-image-recognition";
    double min_value = 0.5;
  };
  ClarifaiBackend(Options options, std::shared_ptr<HttpTransport> transport);
  static Options from_env();

  std::string id() const override { return "clarifai"; }
  HttpRequest build_request(const ProbeImage& image) const override;
  std::vector<LabelPrediction> parse_response(const std::string& body) const override;

 private:
  Options options_;
};

// AWS Signature Version 4.
struct SigV4Credentials {
  std::string access_key;
  std::string secret_key;
  std::string session_token;
};

std::string sigv4_signing_key(const std::string& secret, const std::string& date,
                              const std::string& region, const std::string& service);

// Returns the Authorization header value. `amz_date` is YYYYMMDD'T'HHMMSS'Z'.
// Headers are signed in full; names are lowercased and values trimmed.
std::string sigv4_authorization(const HttpRequest& request, const SigV4Credentials& credentials,
                                const std::string& region, const std::string& service,
                                const std::string& amz_date);

}  // namespace cfaudit::probe
