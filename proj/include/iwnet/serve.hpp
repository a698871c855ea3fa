#pragma once

// HTTP correction service: request decoding, the segment/correct handlers
// as plain functions, and their binding to a cpp-httplib server.
//
// Wire volumes are IWV1: the JSON header inline plus the raw payload in
// base64. Points are in the request volume's voxel space; the model runs at
// its own input side and results are resampled back.

#include <cstdio>
#include <limits>
#include <memory>
#include <string>
#include <string_view>
#include <thread>

#include <nlohmann/json.hpp>
#include <openssl/evp.h>

#include "iwnet/interact.hpp"
#include "iwnet/iwv.hpp"
#include "iwnet/metrics.hpp"
#include "iwnet/wnet.hpp"

// after Eigen: httplib pulls in <resolv.h>, whose _res macro breaks Eigen
#include <httplib.h>

namespace iwnet {

inline constexpr std::size_t kMaxRequestBytes = 64u << 20;

// ---------------------------------------------------------------------------
// base64 via OpenSSL

inline std::string base64_encode(std::string_view bytes) {
  std::string out(4 * ((bytes.size() + 2) / 3), '\0');
  const int n = EVP_EncodeBlock(reinterpret_cast<unsigned char*>(out.data()),
                                reinterpret_cast<const unsigned char*>(bytes.data()), static_cast<int>(bytes.size()));
  out.resize(static_cast<std::size_t>(n));
  return out;
}

inline std::string base64_decode(std::string_view text) {
  if (text.size() % 4 != 0) fail(Errc::malformed_format, "base64 length is not a multiple of 4");
  std::string out(3 * (text.size() / 4), '\0');
  const int n = EVP_DecodeBlock(reinterpret_cast<unsigned char*>(out.data()),
                                reinterpret_cast<const unsigned char*>(text.data()), static_cast<int>(text.size()));
  if (n < 0) fail(Errc::malformed_format, "invalid base64 data");
  std::size_t pad = 0;
  if (!text.empty() && text.back() == '=') ++pad;
  if (text.size() > 1 && text[text.size() - 2] == '=') ++pad;
  out.resize(static_cast<std::size_t>(n) - pad);
  return out;
}

// ---------------------------------------------------------------------------
// Service state and errors

struct ServiceState {
  WNetParams<float> params;
  FieldParams field{0.44, 1e-3};
  std::string model_version;
};

// FNV-1a over the parameter bytes, so identical weights give identical ids.
inline std::string model_fingerprint(const WNetParams<float>& p) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  p.for_each_param([&](const Param<float>& q) {
    const auto* b = reinterpret_cast<const unsigned char*>(q.value.data());
    for (std::size_t i = 0; i < q.value.size() * sizeof(float); ++i) {
      h ^= b[i];
      h *= 0x100000001b3ULL;
    }
  });
  char buf[32];
  std::snprintf(buf, sizeof buf, "iwnet-%016llx", static_cast<unsigned long long>(h));
  return buf;
}

inline ServiceState make_service(WNetParams<float> params, double decay_p) {
  params.config.validate();
  ServiceState s;
  s.field = {decay_p, 1e-3};
  s.field.validate();
  s.model_version = model_fingerprint(params);
  s.params = std::move(params);
  return s;
}

struct HttpResult {
  int status = 200;
  nlohmann::json body;
};

inline int http_status(Errc e) {
  switch (e) {
    case Errc::coincident_points: return 409;
    case Errc::invalid_geometry:
    case Errc::shape_mismatch:
    case Errc::out_of_bounds:
    case Errc::empty_mask:
    case Errc::degenerate_stroke:
    case Errc::invalid_argument: return 422;
    case Errc::malformed_format:
    case Errc::unsupported_version:
    case Errc::payload_length: return 400;
    case Errc::non_finite:
    case Errc::io_failure: return 500;
  }
  return 500;
}

inline HttpResult error_result(int status, const std::string& code, const std::string& message) {
  return {status, {{"code", code}, {"message", message}}};
}

namespace detail {

inline const nlohmann::json& require_member(const nlohmann::json& body, const char* key) {
  if (!body.contains(key)) fail(Errc::malformed_format, std::string("request is missing '") + key + "'");
  return body[key];
}

inline std::string b64_member(const nlohmann::json& body, const char* key) {
  const auto& v = require_member(body, key);
  if (!v.is_string()) fail(Errc::malformed_format, std::string("'") + key + "' must be a base64 string");
  return base64_decode(v.get_ref<const std::string&>());
}

// The request header with its kind/dtype swapped, for companion payloads
// (prior soft mask, ground truth) that share the volume's geometry.
inline nlohmann::json companion_header(const nlohmann::json& header, GridKind kind) {
  auto h = header;
  h["kind"] = kind_name(kind);
  h["dtype"] = kind == GridKind::mask ? "u8" : "f32";
  return h;
}

inline ScalarVolume request_volume(const nlohmann::json& body) {
  const auto& header = require_member(body, "header");
  if (!header.is_object()) fail(Errc::malformed_format, "'header' must be an IWV1 header object");
  return decode<GridKind::scalar>(header, b64_member(body, "data_b64"));
}

// Maps a volume onto the model grid; `scale` gives model voxels per request
// voxel along each axis.
struct ModelFrame {
  std::array<int, 3> dims;
  int side;

  Vec3 to_model(const Vec3& p) const {
    Vec3 q{};
    for (int a = 0; a < 3; ++a) q[a] = resample_dest_coord(p[a], dims[a], side);
    return q;
  }

  nlohmann::json scale() const {
    return {static_cast<double>(side) / dims[0], static_cast<double>(side) / dims[1],
            static_cast<double>(side) / dims[2]};
  }
};

template <GridKind K>
Grid<K> to_model_grid(const Grid<K>& g, int side) {
  if (g.geometry.dims == std::array<int, 3>{side, side, side}) return g;
  return resample_iso(g, side);
}

inline SoftMask from_model_grid(const SoftMask& m, const VolumeGeometry& target) {
  if (m.geometry.dims == target.dims) return SoftMask(target, m.values);
  auto back = resample(m, target.dims);
  return SoftMask(target, std::move(back.values));
}

inline nlohmann::json mask_payload(const SoftMask& soft) {
  const auto mask = threshold(soft);
  return {{"header", iwv_header(soft)},
          {"soft_b64", base64_encode(encode_payload(soft))},
          {"mask_header", iwv_header(mask)},
          {"mask_b64", base64_encode(encode_payload(mask))}};
}

inline nlohmann::json finite_or_null(double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); }

inline double asd_or_nan(const BinaryMask& truth, const BinaryMask& pred) {
  if (count_foreground(pred) == 0) return std::numeric_limits<double>::quiet_NaN();
  return asd(truth, pred);
}

template <class F>
HttpResult guarded(std::string_view body, F&& f) {
  if (body.size() > kMaxRequestBytes)
    return error_result(413, "payload_too_large", "request body exceeds " + std::to_string(kMaxRequestBytes) + " bytes");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(body);
  } catch (const nlohmann::json::exception& e) {
    return error_result(400, "malformed_json", e.what());
  }
  if (!j.is_object()) return error_result(400, "malformed_json", "request body must be a JSON object");
  try {
    return f(j);
  } catch (const Error& e) {
    return error_result(http_status(e.code()), errc_name(e.code()), e.what());
  } catch (const nlohmann::json::exception& e) {
    return error_result(400, "malformed_format", e.what());
  } catch (const std::exception& e) {
    return error_result(500, "internal", e.what());
  }
}

}  // namespace detail

inline HttpResult handle_health(const ServiceState& s) {
  return {200, {{"status", "ok"}, {"model_version", s.model_version}}};
}

struct Segmentation {
  SoftMask soft;
  nlohmann::json scale;
};

struct Correction {
  SoftMask soft;
  PointPair points;        // request voxel space, clamped
  PointPair model_points;  // model grid
  nlohmann::json scale;
};

inline Segmentation segment_volume(const ServiceState& s, const ScalarVolume& vol) {
  const int side = s.params.config.input_side;
  const detail::ModelFrame frame{vol.geometry.dims, side};
  const auto soft = forward_block1(detail::to_model_grid(vol, side), s.params);
  return {detail::from_model_grid(soft, vol.geometry), frame.scale()};
}

inline Correction correct_volume(const ServiceState& s, const ScalarVolume& vol, const SoftMask& prior, const Vec3& p0,
                                 const Vec3& p1) {
  require_same_geometry(vol, prior);
  for (float v : prior.values)
    if (!(v >= 0.0f && v <= 1.0f)) fail(Errc::invalid_argument, "prior soft mask values must lie in [0, 1]");
  const auto user = validate_user_points(p0, p1, vol.geometry);
  const int side = s.params.config.input_side;
  const detail::ModelFrame frame{vol.geometry.dims, side};
  const auto mvol = detail::to_model_grid(vol, side);
  const auto mprior = detail::to_model_grid(prior, side);
  // resampling can merge two neighbouring points into one model voxel
  const auto pair = validate_user_points(frame.to_model(user.p0), frame.to_model(user.p1), mvol.geometry);
  const auto weight = attraction_map(pair, s.field, mvol.geometry);
  auto soft = detail::from_model_grid(forward_block2(mvol, mprior, weight, s.params), vol.geometry);
  return {std::move(soft), user, pair, frame.scale()};
}

inline HttpResult handle_segment(const ServiceState& s, std::string_view body) {
  return detail::guarded(body, [&](const nlohmann::json& j) {
    const auto seg = segment_volume(s, detail::request_volume(j));
    auto out = detail::mask_payload(seg.soft);
    out["model_version"] = s.model_version;
    out["scale"] = seg.scale;
    return HttpResult{200, out};
  });
}

inline HttpResult handle_correct(const ServiceState& s, std::string_view body) {
  return detail::guarded(body, [&](const nlohmann::json& j) {
    const auto vol = detail::request_volume(j);
    const auto& header = j["header"];
    const auto prior = decode<GridKind::soft>(detail::companion_header(header, GridKind::soft),
                                              detail::b64_member(j, "prior_b64"));
    const auto& pts = detail::require_member(j, "points");
    if (!pts.is_array() || pts.size() != 2) fail(Errc::malformed_format, "'points' must hold exactly two [z, y, x] points");
    const auto c = correct_volume(s, vol, prior, pts[0].get<Vec3>(), pts[1].get<Vec3>());

    auto out = detail::mask_payload(c.soft);
    out["model_version"] = s.model_version;
    out["scale"] = c.scale;
    out["points"] = {c.points.p0, c.points.p1};
    out["model_points"] = {c.model_points.p0, c.model_points.p1};
    if (j.contains("ground_truth_b64") && !j["ground_truth_b64"].is_null()) {
      const auto truth = decode<GridKind::mask>(detail::companion_header(header, GridKind::mask),
                                                detail::b64_member(j, "ground_truth_b64"));
      if (count_foreground(truth) == 0) fail(Errc::empty_mask, "ground truth mask is empty");
      const auto initial = threshold(prior);
      const auto corrected = threshold(c.soft);
      const double iou_i = iou(truth, initial);
      const double iou_c = iou(truth, corrected);
      out["metrics"] = {{"iou_initial", iou_i},
                        {"iou_corrected", iou_c},
                        {"asd_mm_initial", detail::finite_or_null(detail::asd_or_nan(truth, initial))},
                        {"asd_mm_corrected", detail::finite_or_null(detail::asd_or_nan(truth, corrected))},
                        {"kept", iou_c > iou_i ? "corrected" : "initial"},
                        {"iou_kept", std::max(iou_i, iou_c)}};
    }
    return HttpResult{200, out};
  });
}

// Request bodies for scripts and tests.
inline nlohmann::json segment_request(const ScalarVolume& v) {
  return {{"header", iwv_header(v)}, {"data_b64", base64_encode(encode_payload(v))}};
}

inline nlohmann::json correct_request(const ScalarVolume& v, const SoftMask& prior, const PointPair& pts,
                                      const BinaryMask* truth = nullptr) {
  auto j = segment_request(v);
  j["prior_b64"] = base64_encode(encode_payload(prior));
  j["points"] = {pts.p0, pts.p1};
  if (truth) j["ground_truth_b64"] = base64_encode(encode_payload(*truth));
  return j;
}

// Decodes the soft/mask pair of a successful response.
inline std::pair<SoftMask, BinaryMask> decode_response_masks(const nlohmann::json& r) {
  return {decode<GridKind::soft>(r.at("header"), base64_decode(r.at("soft_b64").get<std::string>())),
          decode<GridKind::mask>(r.at("mask_header"), base64_decode(r.at("mask_b64").get<std::string>()))};
}

// ---------------------------------------------------------------------------
// HTTP binding

inline void install_routes(httplib::Server& srv, std::shared_ptr<const ServiceState> state) {
  auto reply = [](httplib::Response& res, const HttpResult& r) {
    res.status = r.status;
    res.set_content(r.body.dump(), "application/json");
  };
  srv.Get("/v1/health", [state, reply](const httplib::Request&, httplib::Response& res) {
    reply(res, handle_health(*state));
  });
  srv.Post("/v1/segment", [state, reply](const httplib::Request& req, httplib::Response& res) {
    reply(res, handle_segment(*state, req.body));
  });
  srv.Post("/v1/correct", [state, reply](const httplib::Request& req, httplib::Response& res) {
    reply(res, handle_correct(*state, req.body));
  });
  // httplib answers oversize bodies and unknown routes itself; give those a
  // JSON error body too
  srv.set_error_handler([](const httplib::Request&, httplib::Response& res) {
    if (!res.body.empty()) return;
    const std::string code = res.status == 413 ? "payload_too_large" : res.status == 404 ? "not_found" : "http_error";
    res.set_content(nlohmann::json{{"code", code}, {"message", httplib::status_message(res.status)}}.dump(),
                    "application/json");
  });
  srv.set_payload_max_length(kMaxRequestBytes);
}

}  // namespace iwnet
