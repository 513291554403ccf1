#include "ghfeat/service.hpp"

#include <httplib.h>

#include <mutex>
#include <random>
#include <shared_mutex>
#include <unordered_map>

#include "ghfeat/archive.hpp"
#include "ghfeat/dataset.hpp"
#include "ghfeat/editing.hpp"
#include "ghfeat/errors.hpp"
#include "ghfeat/image_io.hpp"

namespace ghfeat {

using json = nlohmann::json;
using Clock = std::chrono::steady_clock;

namespace {

struct HttpError : std::runtime_error {
  HttpError(int status, const std::string& message) : std::runtime_error(message), status(status) {}
  int status;
};

// Images and their codes are written once and read concurrently afterwards.
struct Entry {
  torch::Tensor image;  // [C, R, R]
  StyleCodeHierarchy codes;
  std::string digest;
};

struct Session {
  Clock::time_point created;
  std::mutex mutex;
  std::unordered_map<std::string, std::shared_ptr<const Entry>> entries;
};

const json& field(const json& body, const char* name) {
  if (!body.is_object() || !body.contains(name)) throw HttpError(400, std::string("missing field '") + name + "'");
  return body.at(name);
}

int64_t int_field(const json& body, const char* name) {
  const auto& v = field(body, name);
  if (!v.is_number_integer()) throw HttpError(400, std::string("field '") + name + "' must be an integer");
  return v.get<int64_t>();
}

std::string string_field(const json& body, const char* name) {
  const auto& v = field(body, name);
  if (!v.is_string()) throw HttpError(400, std::string("field '") + name + "' must be a string");
  return v.get<std::string>();
}

std::string png_field(const torch::Tensor& image) {
  const auto bytes = encode_png(image.clamp(-1.0, 1.0));
  return base64_encode(bytes);
}

std::string codes_digest(const StyleCodeHierarchy& codes) {
  const auto flat = codes.flatten().contiguous();
  return sha256_hex(flat.data_ptr(), static_cast<size_t>(flat.numel()) * flat.element_size());
}

}  // namespace

struct Service::State {
  std::optional<ModelBundle> bundle;
  ServiceOptions options;
  std::shared_mutex sessions_mutex;
  std::unordered_map<std::string, std::shared_ptr<Session>> sessions;
  std::mutex rng_mutex;
  std::mt19937_64 rng{std::random_device{}()};
  httplib::Server server;

  ModelBundle& model() {
    if (!bundle) throw HttpError(503, "no model loaded");
    return *bundle;
  }
  int64_t resolution() { return model().spec().output_resolution; }
  int64_t channels() { return model().spec().image_channels; }

  std::string new_id() {
    std::lock_guard lock(rng_mutex);
    const auto a = rng(), b = rng();
    return sha256_hex(&a, sizeof a).substr(0, 16) + sha256_hex(&b, sizeof b).substr(0, 16);
  }

  void purge_expired() {
    const auto now = options.clock();
    std::unique_lock lock(sessions_mutex);
    std::erase_if(sessions, [&](const auto& kv) { return now - kv.second->created > options.session_ttl; });
  }

  std::shared_ptr<Session> find_session(const std::string& id) {
    purge_expired();
    std::shared_lock lock(sessions_mutex);
    const auto it = sessions.find(id);
    if (it == sessions.end()) throw HttpError(404, "unknown or expired session '" + id + "'");
    return it->second;
  }

  struct SessionRef {
    std::string id;
    std::shared_ptr<Session> session;
    Session* operator->() const { return session.get(); }
    Session& operator*() const { return *session; }
  };

  SessionRef session_for(const HttpRequest& req, const json& body, bool create) {
    std::string id;
    if (body.is_object() && body.contains("session_id") && body["session_id"].is_string()) {
      id = body["session_id"].get<std::string>();
    } else if (auto it = req.query.find("session_id"); it != req.query.end()) {
      id = it->second;
    } else if (auto h = req.headers.find("X-Session-Id"); h != req.headers.end()) {
      id = h->second;
    }
    if (!id.empty()) return {id, find_session(id)};
    if (!create) throw HttpError(400, "missing session_id");
    purge_expired();
    auto s = std::make_shared<Session>();
    s->created = options.clock();
    std::unique_lock lock(sessions_mutex);
    id = new_id();
    sessions.emplace(id, s);
    return {id, s};
  }

  std::shared_ptr<const Entry> entry(Session& s, const std::string& id) {
    std::lock_guard lock(s.mutex);
    const auto it = s.entries.find(id);
    if (it == s.entries.end()) throw HttpError(404, "unknown image id '" + id + "'");
    return it->second;
  }

  // Decodes a base64 PNG into a model-sized image; sets `resized` when the
  // payload had to be resampled.
  torch::Tensor decode_image(const std::string& b64, bool& resized, int64_t channels_out) {
    torch::Tensor img;
    try {
      const auto bytes = base64_decode(b64);
      img = decode_png(bytes, channels_out);
    } catch (const std::exception& e) {
      throw HttpError(400, std::string("undecodable image payload: ") + e.what());
    }
    resized = img.size(1) != resolution() || img.size(2) != resolution();
    if (resized) img = conform_images(img.unsqueeze(0), resolution(), channels_out).squeeze(0);
    return img;
  }

  LevelRange range_from(const json& body) {
    const auto lo = int_field(body, "lo"), hi = int_field(body, "hi");
    const auto l = model().spec().layer_count();
    if (lo < 1 || hi < lo || hi > l) {
      throw HttpError(400, "level range " + std::to_string(lo) + ":" + std::to_string(hi) + " outside 1.." +
                               std::to_string(l));
    }
    return {lo, hi};
  }
};

Service::Service(std::optional<ModelBundle> bundle, ServiceOptions options) : state_(std::make_unique<State>()) {
  state_->bundle = std::move(bundle);
  state_->options = std::move(options);

  auto bridge = [this](const httplib::Request& req, httplib::Response& res) {
    HttpRequest r;
    r.method = req.method;
    r.path = req.path;
    r.body = req.body;
    for (const auto& [k, v] : req.params) r.query.emplace(k, v);
    for (const auto& [k, v] : req.headers) r.headers.emplace(k, v);
    const auto out = handle(r);
    res.status = out.status;
    res.set_content(out.body.dump(), "application/json");
  };
  for (const char* p : {"/encode", "/mix", "/sample", "/edit/local", "/harmonize"}) state_->server.Post(p, bridge);
  for (const char* p : {"/reconstruct", "/levels", "/health"}) state_->server.Get(p, bridge);
  state_->server.set_payload_max_length(16 << 20);
}

Service::~Service() { stop(); }

bool Service::listen(const std::string& host, int port) { return state_->server.listen(host, port); }
int Service::bind_any_port(const std::string& host) { return state_->server.bind_to_any_port(host); }
bool Service::listen_after_bind() { return state_->server.listen_after_bind(); }
void Service::stop() {
  if (state_->server.is_running()) state_->server.stop();
}

size_t Service::session_count() {
  state_->purge_expired();
  std::shared_lock lock(state_->sessions_mutex);
  return state_->sessions.size();
}

HttpResponse Service::handle(const HttpRequest& req) {
  auto& st = *state_;
  try {
    torch::NoGradGuard no_grad;
    json body = json::object();
    if (req.method == "POST") {
      try {
        body = json::parse(req.body.empty() ? "{}" : req.body);
      } catch (const json::exception&) {
        throw HttpError(400, "request body is not valid JSON");
      }
      if (!body.is_object()) throw HttpError(400, "request body must be a JSON object");
    }
    const auto route = req.method + " " + req.path;

    if (route == "GET /health") {
      json j{{"status", "ok"}, {"version", st.options.version}, {"model_loaded", st.bundle.has_value()}};
      if (st.bundle) {
        j["generator_digest"] = st.bundle->generator_digest;
        j["encoder_digest"] = st.bundle->encoder_digest;
      }
      return {200, j};
    }

    if (route == "GET /levels") {
      const auto& spec = st.model().spec();
      json levels = json::array();
      for (int64_t level = 1; level <= spec.layer_count(); ++level) {
        const auto layer = level_to_layer(level, spec.layer_count());
        levels.push_back({{"level", level},
                          {"layer", layer},
                          {"channels", spec.channels(layer)},
                          {"resolution", spec.resolution(layer)},
                          {"dims", 2 * spec.channels(layer)}});
      }
      return {200, {{"levels", spec.layer_count()},
                    {"resolution", spec.output_resolution},
                    {"image_channels", spec.image_channels},
                    {"per_level", levels}}};
    }

    if (route == "POST /encode") {
      auto& m = st.model();
      const auto payload = string_field(body, "image");
      auto session = st.session_for(req, body, /*create=*/true);
      bool resized = false;
      const auto image = st.decode_image(payload, resized, st.channels());
      const auto pixels = to_uint8(image).contiguous();
      const auto image_id = sha256_hex(pixels.data_ptr(), static_cast<size_t>(pixels.numel())).substr(0, 24);

      std::shared_ptr<const Entry> entry;
      bool cached = false;
      {
        std::lock_guard lock(session->mutex);
        if (auto it = session->entries.find(image_id); it != session->entries.end()) {
          entry = it->second;
          cached = true;
        }
      }
      if (!entry) {
        auto fresh = std::make_shared<Entry>();
        fresh->image = image;
        fresh->codes = m.encoder->encode_styles(image.unsqueeze(0), *m.generator).detach();
        fresh->digest = codes_digest(fresh->codes);
        std::lock_guard lock(session->mutex);
        // first writer wins; a concurrent duplicate keeps the stored entry
        entry = session->entries.emplace(image_id, std::move(fresh)).first->second;
      }
      const auto& spec = m.spec();
      json dims = json::array();
      for (int64_t level = 1; level <= spec.layer_count(); ++level) {
        dims.push_back(2 * spec.channels(level_to_layer(level, spec.layer_count())));
      }
      return {200, {{"session_id", session.id},
                    {"image_id", image_id},
                    {"levels", spec.layer_count()},
                    {"per_level_dims", dims},
                    {"resized", resized},
                    {"cached", cached},
                    {"digest", entry->digest}}};
    }

    if (route == "GET /reconstruct") {
      auto session = st.session_for(req, body, false);
      const auto it = req.query.find("image_id");
      if (it == req.query.end()) throw HttpError(400, "missing image_id");
      const auto e = st.entry(*session, it->second);
      return {200, {{"image", png_field(reconstruct(*st.model().generator, e->codes)[0])}}};
    }

    if (route == "POST /mix") {
      auto& m = st.model();
      auto session = st.session_for(req, body, false);
      const auto content = st.entry(*session, string_field(body, "content_id"));
      const auto style = st.entry(*session, string_field(body, "style_id"));
      const auto range = st.range_from(body);
      return {200, {{"image", png_field(style_mix(*m.generator, content->codes, style->codes, range)[0])}}};
    }

    if (route == "POST /sample") {
      auto& m = st.model();
      auto session = st.session_for(req, body, false);
      const auto base = st.entry(*session, string_field(body, "base_id"));
      const auto range = st.range_from(body);
      const auto seed = int_field(body, "seed");
      if (seed < 0) throw HttpError(400, "seed must be non-negative");
      bool direct = body.value("direct_style", false);
      const auto img = global_edit(*m.generator, base->codes, range, static_cast<uint64_t>(seed),
                                   direct ? DonorSampling::kDirectStyle : DonorSampling::kLatentPipeline);
      return {200, {{"image", png_field(img[0])}}};
    }

    if (route == "POST /edit/local") {
      auto& m = st.model();
      auto session = st.session_for(req, body, false);
      const auto base = st.entry(*session, string_field(body, "base_id"));
      const auto donor = st.entry(*session, string_field(body, "donor_id"));
      const auto layer = int_field(body, "layer");
      if (layer < 1 || layer > m.spec().layer_count()) throw HttpError(400, "layer out of range");
      bool resized = false;
      const auto mask_img = st.decode_image(string_field(body, "mask_png"), resized, 1);
      const auto mask = (mask_img[0] > 0.0).to(torch::kFloat32);
      const auto r = local_edit(*m.generator, base->codes, layer, mask, donor->codes);
      return {200, {{"image", png_field(r.image[0])}, {"empty_mask", r.empty_mask}}};
    }

    if (route == "POST /harmonize") {
      auto& m = st.model();
      bool resized = false;
      const auto image = st.decode_image(string_field(body, "image"), resized, st.channels());
      const auto out = harmonize(*m.encoder, *m.generator, image.unsqueeze(0));
      return {200, {{"image", png_field(out[0])}, {"resized", resized}}};
    }

    throw HttpError(404, "no route for " + route);
  } catch (const HttpError& e) {
    return {e.status, {{"code", e.status}, {"message", e.what()}}};
  } catch (const ContractViolation& e) {
    return {400, {{"code", 400}, {"message", e.what()}}};
  } catch (const std::exception& e) {
    return {500, {{"code", 500}, {"message", e.what()}}};
  }
}

}  // namespace ghfeat
