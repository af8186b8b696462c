#pragma once

// Synthetic hand sequences: a 21-joint kinematic hand, pinhole cameras, a
// stick-and-blob renderer and a seeded generator for temporal clips and
// multi-view sets, plus the STHD dataset file.
//
// Joint order: 0 wrist, then for finger f (thumb, index, middle, ring, pinky)
// joints 1+4f .. 4+4f are MCP, PIP, DIP, TIP. The reference bone runs from
// the wrist to joint 9, the middle-finger MCP.

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <numbers>
#include <random>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "seqhand/errors.hpp"
#include "seqhand/io.hpp"

namespace seqhand::data {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;

inline constexpr std::size_t kJoints = 21;
inline constexpr std::size_t kFingers = 5;
inline constexpr std::size_t kReferenceJoint = 9;

inline constexpr double deg(double d) { return d * std::numbers::pi / 180.0; }

inline constexpr std::size_t joint_index(std::size_t finger, std::size_t k) { return 1 + 4 * finger + k; }

// Palm layout and segment lengths. Fingers lie in the x-y plane pointing
// along their base direction; the palm normal is +z.
struct HandGeometry {
  std::array<Vec3, kFingers> mcp;        // relative to the wrist
  std::array<Vec3, kFingers> direction;  // unit, in the palm plane
  std::array<std::array<double, 3>, kFingers> length;  // proximal, middle, distal
  Vec3 normal{0, 0, 1};

  static HandGeometry canonical() {
    HandGeometry g;
    g.mcp = {Vec3(0.45, 0.35, 0), Vec3(0.30, 0.95, 0), Vec3(0.0, 1.0, 0), Vec3(-0.28, 0.95, 0),
             Vec3(-0.52, 0.85, 0)};
    g.direction = {Vec3(0.7, 0.7, 0).normalized(), Vec3(0, 1, 0), Vec3(0, 1, 0), Vec3(0, 1, 0),
                   Vec3(0, 1, 0)};
    g.length = {{{0.35, 0.30, 0.25}, {0.42, 0.25, 0.20}, {0.45, 0.28, 0.22}, {0.42, 0.26, 0.20},
                 {0.33, 0.20, 0.18}}};
    return g;
  }

  // Uniform size plus per-finger length factors.
  HandGeometry scaled(double size, const std::array<double, kFingers>& finger_factor) const {
    HandGeometry g = *this;
    for (std::size_t f = 0; f < kFingers; ++f) {
      g.mcp[f] *= size;
      for (auto& l : g.length[f]) l *= size * finger_factor[f];
    }
    return g;
  }

  double longest_segment() const {
    double m = 0;
    for (const auto& f : length)
      for (const auto l : f) m = std::max(m, l);
    return m;
  }
};

struct AngleRange {
  double lo, hi;
  bool contains(double v) const { return v >= lo - 1e-12 && v <= hi + 1e-12; }
  double clamp(double v) const { return std::clamp(v, lo, hi); }
};

// Anatomical limits in radians. Joint 0 of flexion is the MCP.
struct JointLimits {
  static AngleRange abduction(std::size_t finger) {
    return finger == 0 ? AngleRange{deg(-20), deg(30)} : AngleRange{deg(-15), deg(15)};
  }
  static AngleRange flexion(std::size_t k) {
    static constexpr std::array<AngleRange, 3> r{{{deg(-10), deg(90)}, {0.0, deg(100)}, {0.0, deg(80)}}};
    return r[k];
  }
};

struct HandPose {
  std::array<double, kFingers> abduction{};
  std::array<std::array<double, 3>, kFingers> flexion{};  // MCP, PIP, DIP
  Mat3 rotation = Mat3::Identity();
  Vec3 translation = Vec3::Zero();
};

struct KinematicHand {
  HandGeometry geometry = HandGeometry::canonical();
  HandPose pose;
};

using Joints3 = std::array<Vec3, kJoints>;
using Joints2 = std::array<Eigen::Vector2d, kJoints>;

// Zero-angle joints in the hand frame.
inline Joints3 flat_template(const HandGeometry& g) {
  Joints3 j;
  j[0] = Vec3::Zero();
  for (std::size_t f = 0; f < kFingers; ++f) {
    Vec3 p = g.mcp[f];
    j[joint_index(f, 0)] = p;
    for (std::size_t k = 0; k < 3; ++k) {
      p = p + g.length[f][k] * g.direction[f];
      j[joint_index(f, k + 1)] = p;
    }
  }
  return j;
}

inline void check_limits(const HandPose& pose) {
  for (std::size_t f = 0; f < kFingers; ++f) {
    if (!JointLimits::abduction(f).contains(pose.abduction[f])) {
      throw DomainError("finger " + std::to_string(f) + ": abduction " +
                        std::to_string(pose.abduction[f]) + " rad outside limits");
    }
    for (std::size_t k = 0; k < 3; ++k) {
      if (!JointLimits::flexion(k).contains(pose.flexion[f][k])) {
        throw DomainError("finger " + std::to_string(f) + " joint " + std::to_string(k) +
                          ": flexion " + std::to_string(pose.flexion[f][k]) +
                          " rad outside limits");
      }
    }
  }
}

// Abduction turns the finger about the palm normal at its MCP. Flexion then
// bends the chain toward -normal; segment k points along
// cos(phi) u + sin(phi) (-n) with phi the sum of flexion angles up to k.
inline Joints3 forward_kinematics(const KinematicHand& hand) {
  const auto& g = hand.geometry;
  const auto& pose = hand.pose;
  check_limits(pose);
  Joints3 local;
  local[0] = Vec3::Zero();
  for (std::size_t f = 0; f < kFingers; ++f) {
    const Vec3 u = Eigen::AngleAxisd(pose.abduction[f], g.normal) * g.direction[f];
    Vec3 p = g.mcp[f];
    local[joint_index(f, 0)] = p;
    double phi = 0;
    for (std::size_t k = 0; k < 3; ++k) {
      phi += pose.flexion[f][k];
      const Vec3 d = std::cos(phi) * u - std::sin(phi) * g.normal;
      p = p + g.length[f][k] * d;
      local[joint_index(f, k + 1)] = p;
    }
  }
  Joints3 world;
  for (std::size_t i = 0; i < kJoints; ++i) world[i] = pose.rotation * local[i] + pose.translation;
  return world;
}

// Pinhole camera; x_cam = R (X - center). Rows of R are the camera axes, with
// +z along the viewing direction and +y pointing down in the image.
struct Camera {
  double fx = 1, fy = 1, cx = 0, cy = 0;
  Mat3 rotation = Mat3::Identity();
  Vec3 center = Vec3::Zero();

  static Camera look_at(const Vec3& eye, const Vec3& target, const Vec3& up, double fx, double fy,
                        double cx, double cy) {
    Camera c;
    c.fx = fx;
    c.fy = fy;
    c.cx = cx;
    c.cy = cy;
    const Vec3 zc = (target - eye).normalized();
    const Vec3 xc = zc.cross(up).normalized();
    const Vec3 yc = zc.cross(xc);
    c.rotation.row(0) = xc;
    c.rotation.row(1) = yc;
    c.rotation.row(2) = zc;
    c.center = eye;
    c.validate();
    return c;
  }

  void validate() const {
    if (!(fx > 0) || !(fy > 0)) throw ContractError("camera focal lengths must be positive");
    if ((rotation.transpose() * rotation - Mat3::Identity()).norm() > 1e-6 ||
        std::abs(rotation.determinant() - 1.0) > 1e-6) {
      throw ContractError("camera rotation is not a proper rotation");
    }
  }

  Vec3 to_camera(const Vec3& x) const { return rotation * (x - center); }
};

inline Eigen::Vector2d project_point(const Vec3& x, const Camera& cam) {
  const Vec3 c = cam.to_camera(x);
  if (!(c.z() > 0)) throw ProjectionError("point at depth " + std::to_string(c.z()) + " is not in front of the camera");
  return {cam.fx * c.x() / c.z() + cam.cx, cam.fy * c.y() / c.z() + cam.cy};
}

inline Joints2 project(const Joints3& joints, const Camera& cam) {
  Joints2 out;
  for (std::size_t i = 0; i < kJoints; ++i) out[i] = project_point(joints[i], cam);
  return out;
}

// ---------------------------------------------------------------------------
// Rendering

struct Rgb {
  float r, g, b;
};

struct RenderStyle {
  Rgb background{0.15f, 0.15f, 0.18f};
  float noise = 0.04f;         // uniform background noise amplitude
  float bone_halfwidth = 0.9f;  // pixels
  float blob_sigma = 0.8f;      // pixels
  std::uint64_t noise_seed = 0;
  std::array<Rgb, kFingers> finger{{{0.95f, 0.25f, 0.2f},
                                    {0.25f, 0.9f, 0.3f},
                                    {0.3f, 0.45f, 1.0f},
                                    {0.95f, 0.85f, 0.2f},
                                    {0.85f, 0.3f, 0.9f}}};
  Rgb wrist{0.95f, 0.95f, 0.95f};

  // Stroke sizes proportional to a 32-pixel reference frame.
  static RenderStyle for_size(std::size_t img_w) {
    RenderStyle s;
    const float k = static_cast<float>(img_w) / 32.0f;
    s.bone_halfwidth *= k;
    s.blob_sigma *= k;
    return s;
  }
};

namespace detail {

inline void composite(std::vector<float>& img, std::size_t h, std::size_t w, std::size_t y,
                      std::size_t x, float alpha, Rgb c) {
  if (alpha <= 0) return;
  const std::size_t plane = h * w, at = y * w + x;
  img[at] = (1 - alpha) * img[at] + alpha * c.r;
  img[plane + at] = (1 - alpha) * img[plane + at] + alpha * c.g;
  img[2 * plane + at] = (1 - alpha) * img[2 * plane + at] + alpha * c.b;
}

// Coverage of pixel centers by a segment of half-width hw, with a one-pixel
// linear falloff.
inline void draw_segment(std::vector<float>& img, std::size_t h, std::size_t w,
                         const Eigen::Vector2d& a, const Eigen::Vector2d& b, float hw, Rgb c) {
  const double reach = hw + 1.0;
  const int x0 = std::max(0, static_cast<int>(std::floor(std::min(a.x(), b.x()) - reach)));
  const int x1 = std::min(static_cast<int>(w) - 1, static_cast<int>(std::ceil(std::max(a.x(), b.x()) + reach)));
  const int y0 = std::max(0, static_cast<int>(std::floor(std::min(a.y(), b.y()) - reach)));
  const int y1 = std::min(static_cast<int>(h) - 1, static_cast<int>(std::ceil(std::max(a.y(), b.y()) + reach)));
  const Eigen::Vector2d ab = b - a;
  const double len2 = ab.squaredNorm();
  for (int y = y0; y <= y1; ++y)
    for (int x = x0; x <= x1; ++x) {
      const Eigen::Vector2d p(x + 0.5, y + 0.5);
      const double t = len2 > 0 ? std::clamp((p - a).dot(ab) / len2, 0.0, 1.0) : 0.0;
      const double dist = (p - (a + t * ab)).norm();
      const auto alpha = static_cast<float>(std::clamp(hw + 0.5 - dist, 0.0, 1.0));
      composite(img, h, w, static_cast<std::size_t>(y), static_cast<std::size_t>(x), alpha, c);
    }
}

// Gaussian blob truncated at three sigma.
inline void draw_blob(std::vector<float>& img, std::size_t h, std::size_t w,
                      const Eigen::Vector2d& center, float sigma, Rgb c) {
  const double reach = 3.0 * sigma;
  const int x0 = std::max(0, static_cast<int>(std::floor(center.x() - reach)));
  const int x1 = std::min(static_cast<int>(w) - 1, static_cast<int>(std::ceil(center.x() + reach)));
  const int y0 = std::max(0, static_cast<int>(std::floor(center.y() - reach)));
  const int y1 = std::min(static_cast<int>(h) - 1, static_cast<int>(std::ceil(center.y() + reach)));
  for (int y = y0; y <= y1; ++y)
    for (int x = x0; x <= x1; ++x) {
      const double d = (Eigen::Vector2d(x + 0.5, y + 0.5) - center).norm();
      if (d > reach) continue;
      const auto alpha = static_cast<float>(std::exp(-d * d / (2.0 * sigma * sigma)));
      composite(img, h, w, static_cast<std::size_t>(y), static_cast<std::size_t>(x), alpha, c);
    }
}

}  // namespace detail

// 3 x h x w in [0,1]. Fingers with visible[f] == false are not drawn, their
// palm segment included.
inline std::vector<float> render(const Joints2& joints, std::size_t img_h, std::size_t img_w,
                                 const RenderStyle& style,
                                 const std::array<bool, kFingers>& visible = {true, true, true, true, true}) {
  if (img_h < 16 || img_w < 16) throw ContractError("render: frames must be at least 16x16");
  const std::size_t plane = img_h * img_w;
  std::vector<float> img(3 * plane);
  std::mt19937_64 rng(style.noise_seed);
  std::uniform_real_distribution<float> noise(-style.noise, style.noise);
  const std::array<float, 3> base{style.background.r, style.background.g, style.background.b};
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t i = 0; i < plane; ++i) img[c * plane + i] = std::clamp(base[c] + noise(rng), 0.0f, 1.0f);
  for (std::size_t f = 0; f < kFingers; ++f) {
    if (!visible[f]) continue;
    detail::draw_segment(img, img_h, img_w, joints[0], joints[joint_index(f, 0)], style.bone_halfwidth,
                         style.finger[f]);
    for (std::size_t k = 0; k < 3; ++k) {
      detail::draw_segment(img, img_h, img_w, joints[joint_index(f, k)], joints[joint_index(f, k + 1)],
                           style.bone_halfwidth, style.finger[f]);
    }
    for (std::size_t k = 0; k < 4; ++k) {
      detail::draw_blob(img, img_h, img_w, joints[joint_index(f, k)], style.blob_sigma, style.finger[f]);
    }
  }
  detail::draw_blob(img, img_h, img_w, joints[0], style.blob_sigma * 1.5f, style.wrist);
  return img;
}

// ---------------------------------------------------------------------------
// Dataset

enum class Mode : std::uint32_t { temporal = 0, angular = 1 };

inline Mode mode_from(const std::string& s) {
  if (s == "temporal") return Mode::temporal;
  if (s == "angular") return Mode::angular;
  throw ContractError("mode must be 'temporal' or 'angular', got '" + s + "'");
}
inline const char* mode_name(Mode m) { return m == Mode::temporal ? "temporal" : "angular"; }

struct GenerateOptions {
  Mode mode = Mode::temporal;
  std::size_t subjects = 2;
  std::size_t activities = 2;
  std::size_t sequences = 4;  // per (subject, activity)
  std::size_t length = 5;     // frames (temporal) or cameras (angular)
  std::size_t img_h = 32, img_w = 32;
  std::uint64_t seed = 1;
  double max_angle_step = deg(6);  // per joint and frame, temporal mode
  double camera_spacing = deg(30);
  double camera_distance = 8.0;
  double occlusion_rate = 0.0;  // probability a frame has one finger blanked
  std::size_t workers = 1;
};

struct SampleMeta {
  std::uint32_t subject = 0, activity = 0, sequence = 0;
  std::vector<std::uint32_t> camera;  // per frame
  std::vector<std::int32_t> occluded;  // blanked finger per frame, -1 for none
  std::vector<std::array<double, 3>> root;  // world wrist per frame
  std::vector<double> scale;  // reference bone length per frame
};

inline bool operator==(const Camera& a, const Camera& b) {
  return a.fx == b.fx && a.fy == b.fy && a.cx == b.cx && a.cy == b.cy && a.rotation == b.rotation &&
         a.center == b.center;
}
inline bool operator==(const SampleMeta& a, const SampleMeta& b) {
  return a.subject == b.subject && a.activity == b.activity && a.sequence == b.sequence &&
         a.camera == b.camera && a.occluded == b.occluded && a.root == b.root && a.scale == b.scale;
}

struct Dataset {
  Mode mode = Mode::temporal;
  std::size_t length = 0, img_h = 0, img_w = 0, channels = 3;
  std::size_t subjects = 0, activities = 0, sequences = 0;
  std::vector<Camera> cameras;
  std::vector<SampleMeta> meta;
  std::vector<float> frames;  // count x N x 3 x h x w
  std::vector<float> gt2d;    // count x N x 21 x 2, pixels
  std::vector<float> gt3d;    // count x N x 21 x 3, root-relative, unit reference bone

  std::size_t size() const { return meta.size(); }
  std::size_t frame_size() const { return channels * img_h * img_w; }
  const float* frame(std::size_t sample, std::size_t i) const {
    return frames.data() + (sample * length + i) * frame_size();
  }
  const float* joints2d(std::size_t sample, std::size_t i) const {
    return gt2d.data() + (sample * length + i) * kJoints * 2;
  }
  const float* joints3d(std::size_t sample, std::size_t i) const {
    return gt3d.data() + (sample * length + i) * kJoints * 3;
  }

  bool operator==(const Dataset&) const = default;
};

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t sub_seed(std::uint64_t seed, std::uint64_t tag, std::uint64_t index) {
  return splitmix64(splitmix64(seed ^ splitmix64(tag)) + index);
}

enum : std::uint64_t { kSubjectTag = 1, kActivityTag = 2, kSequenceTag = 3 };

// Camera k of a ring around the vertical axis, centered on the +z axis.
inline Camera ring_camera(std::size_t k, std::size_t count, const GenerateOptions& o) {
  const double theta = (static_cast<double>(k) - 0.5 * static_cast<double>(count - 1)) * o.camera_spacing;
  const Vec3 eye(o.camera_distance * std::sin(theta), 0, o.camera_distance * std::cos(theta));
  const double f = static_cast<double>(o.img_w) * o.camera_distance / 3.4;
  return Camera::look_at(eye, Vec3::Zero(), Vec3(0, 1, 0), f, f, 0.5 * static_cast<double>(o.img_w),
                         0.5 * static_cast<double>(o.img_h));
}

// Per-activity preferred posture: a fraction of each flexion range.
struct ActivityStyle {
  std::array<std::array<double, 3>, kFingers> flex_center;
  std::array<double, kFingers> abd_center;
};

inline ActivityStyle activity_style(std::uint64_t seed, std::size_t activity) {
  std::mt19937_64 rng(sub_seed(seed, kActivityTag, activity));
  std::uniform_real_distribution<double> u(0.15, 0.6);
  ActivityStyle s;
  for (std::size_t f = 0; f < kFingers; ++f) {
    for (std::size_t k = 0; k < 3; ++k) {
      const auto r = JointLimits::flexion(k);
      s.flex_center[f][k] = r.lo + u(rng) * (r.hi - r.lo);
    }
    const auto r = JointLimits::abduction(f);
    s.abd_center[f] = r.lo + (u(rng) + 0.2) * (r.hi - r.lo);
  }
  return s;
}

inline HandGeometry subject_geometry(std::uint64_t seed, std::size_t subject) {
  std::mt19937_64 rng(sub_seed(seed, kSubjectTag, subject));
  std::uniform_real_distribution<double> size(0.85, 1.15), finger(0.93, 1.07);
  const double s = size(rng);
  std::array<double, kFingers> factor;
  for (auto& v : factor) v = finger(rng);
  return HandGeometry::canonical().scaled(s, factor);
}

struct FrameTruth {
  Joints3 world;
  std::uint32_t camera;
  std::int32_t occluded;
};

inline void emit_sample(const GenerateOptions& o, const std::vector<Camera>& cams,
                        const HandGeometry& geom, const std::vector<FrameTruth>& truth,
                        std::uint64_t render_seed, std::size_t slot, Dataset& ds) {
  const std::size_t n = o.length, fs = 3 * o.img_h * o.img_w;
  std::mt19937_64 rng(render_seed);
  std::uniform_real_distribution<float> bg(0.05f, 0.3f);
  auto style = RenderStyle::for_size(o.img_w);
  style.background = {bg(rng), bg(rng), bg(rng)};
  auto& meta = ds.meta[slot];
  const double ref = (geom.mcp[2]).norm();
  for (std::size_t i = 0; i < n; ++i) {
    const auto& t = truth[i];
    const auto& cam = cams[t.camera];
    const auto joints2 = project(t.world, cam);
    std::array<bool, kFingers> visible{true, true, true, true, true};
    if (t.occluded >= 0) visible[static_cast<std::size_t>(t.occluded)] = false;
    style.noise_seed = rng();
    const auto img = render(joints2, o.img_h, o.img_w, style, visible);
    std::copy(img.begin(), img.end(), ds.frames.begin() + static_cast<std::ptrdiff_t>((slot * n + i) * fs));
    const Vec3 root = t.world[0];
    for (std::size_t j = 0; j < kJoints; ++j) {
      const auto at2 = ((slot * n + i) * kJoints + j) * 2;
      ds.gt2d[at2] = static_cast<float>(joints2[j].x());
      ds.gt2d[at2 + 1] = static_cast<float>(joints2[j].y());
      const Vec3 rel = (t.world[j] - root) / ref;
      const auto at3 = ((slot * n + i) * kJoints + j) * 3;
      for (int c = 0; c < 3; ++c) ds.gt3d[at3 + c] = static_cast<float>(rel[c]);
    }
    meta.camera[i] = t.camera;
    meta.occluded[i] = t.occluded;
    meta.root[i] = {root.x(), root.y(), root.z()};
    meta.scale[i] = ref;
  }
}

inline void generate_sequence(const GenerateOptions& o, const std::vector<Camera>& cams,
                              std::size_t subject, std::size_t activity, std::size_t seq,
                              std::size_t slot, Dataset& ds) {
  const std::size_t index = (subject * o.activities + activity) * o.sequences + seq;
  std::mt19937_64 rng(sub_seed(o.seed, kSequenceTag, index));
  std::uniform_real_distribution<double> unit(-1.0, 1.0);
  const auto style = activity_style(o.seed, activity);
  KinematicHand hand;
  hand.geometry = subject_geometry(o.seed, subject);

  auto& pose = hand.pose;
  for (std::size_t f = 0; f < kFingers; ++f) {
    pose.abduction[f] = JointLimits::abduction(f).clamp(style.abd_center[f] + deg(6) * unit(rng));
    for (std::size_t k = 0; k < 3; ++k) {
      pose.flexion[f][k] = JointLimits::flexion(k).clamp(style.flex_center[f][k] + deg(15) * unit(rng));
    }
  }
  pose.rotation = (Eigen::AngleAxisd(deg(30) * unit(rng), Vec3::UnitZ()) *
                   Eigen::AngleAxisd(deg(25) * unit(rng), Vec3::UnitY()) *
                   Eigen::AngleAxisd(deg(25) * unit(rng), Vec3::UnitX()))
                      .toRotationMatrix();
  // Center the palm near the origin.
  const Vec3 jitter(0.25 * unit(rng), 0.25 * unit(rng), 0.5 * unit(rng));
  pose.translation = -(pose.rotation * Vec3(0, 0.9, 0) * hand.geometry.mcp[2].norm()) + jitter;

  std::vector<FrameTruth> truth(o.length);
  std::uniform_real_distribution<double> occ(0.0, 1.0);
  std::uniform_int_distribution<int> which(0, static_cast<int>(kFingers) - 1);
  // Occlusion draws come from their own stream so they never perturb poses.
  // One finger per sequence, blanked in a random subset of its frames.
  std::mt19937_64 occ_rng(rng());
  const int blanked = which(occ_rng);
  auto occlusion = [&]() -> std::int32_t { return occ(occ_rng) < o.occlusion_rate ? blanked : -1; };

  if (o.mode == Mode::angular) {
    const auto world = forward_kinematics(hand);
    for (std::size_t i = 0; i < o.length; ++i) {
      truth[i] = {world, static_cast<std::uint32_t>(i), occlusion()};
    }
  } else {
    // Bounded random walk on angular velocity; clamping keeps every step
    // within max_angle_step.
    const double step = o.max_angle_step;
    std::array<std::array<double, 4>, kFingers> vel{};
    const Vec3 drift(0.02 * unit(rng), 0.02 * unit(rng), 0.0);
    for (std::size_t i = 0; i < o.length; ++i) {
      if (i > 0) {
        for (std::size_t f = 0; f < kFingers; ++f) {
          for (std::size_t k = 0; k < 4; ++k) {
            auto& v = vel[f][k];
            v = std::clamp(v + 0.5 * step * unit(rng), -step, step);
            if (k == 3) {
              pose.abduction[f] = JointLimits::abduction(f).clamp(pose.abduction[f] + v);
            } else {
              pose.flexion[f][k] = JointLimits::flexion(k).clamp(pose.flexion[f][k] + v);
            }
          }
        }
        pose.translation += drift;
      }
      truth[i] = {forward_kinematics(hand), 0, occlusion()};
    }
  }
  auto& meta = ds.meta[slot];
  meta.subject = static_cast<std::uint32_t>(subject + 1);
  meta.activity = static_cast<std::uint32_t>(activity + 1);
  meta.sequence = static_cast<std::uint32_t>(seq);
  meta.camera.resize(o.length);
  meta.occluded.resize(o.length);
  meta.root.resize(o.length);
  meta.scale.resize(o.length);
  emit_sample(o, cams, hand.geometry, truth, rng(), slot, ds);
}

}  // namespace detail

// Subjects and activities are numbered from 1. Sample order is subject-major,
// then activity, then sequence. Every sequence draws from its own seeded
// stream, so the worker count never changes the output.
inline Dataset generate_dataset(const GenerateOptions& o) {
  if (o.subjects == 0 || o.activities == 0 || o.sequences == 0 || o.length == 0) {
    throw ContractError("generate: counts and length must be at least 1");
  }
  if (o.img_h < 16 || o.img_w < 16) throw ContractError("generate: frames must be at least 16x16");
  if (o.occlusion_rate < 0 || o.occlusion_rate > 1) throw ContractError("generate: occlusion_rate must lie in [0,1]");
  Dataset ds;
  ds.mode = o.mode;
  ds.length = o.length;
  ds.img_h = o.img_h;
  ds.img_w = o.img_w;
  ds.subjects = o.subjects;
  ds.activities = o.activities;
  ds.sequences = o.sequences;
  const std::size_t ncam = o.mode == Mode::angular ? o.length : 1;
  for (std::size_t k = 0; k < ncam; ++k) ds.cameras.push_back(detail::ring_camera(k, ncam, o));
  const std::size_t count = o.subjects * o.activities * o.sequences;
  ds.meta.resize(count);
  ds.frames.resize(count * o.length * ds.frame_size());
  ds.gt2d.resize(count * o.length * kJoints * 2);
  ds.gt3d.resize(count * o.length * kJoints * 3);

  auto work = [&](std::size_t first, std::size_t stride) {
    for (std::size_t slot = first; slot < count; slot += stride) {
      const std::size_t seq = slot % o.sequences;
      const std::size_t activity = (slot / o.sequences) % o.activities;
      const std::size_t subject = slot / (o.sequences * o.activities);
      detail::generate_sequence(o, ds.cameras, subject, activity, seq, slot, ds);
    }
  };
  const std::size_t workers = std::clamp<std::size_t>(o.workers, 1, count);
  if (workers == 1) {
    work(0, 1);
  } else {
    std::vector<std::jthread> pool;
    for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(work, w, workers);
  }
  return ds;
}

// World-frame joints of one frame, recovered from the stored targets.
inline Joints3 unnormalized_joints(const Dataset& ds, std::size_t sample, std::size_t i) {
  const auto& m = ds.meta[sample];
  const float* g = ds.joints3d(sample, i);
  const Vec3 root(m.root[i][0], m.root[i][1], m.root[i][2]);
  Joints3 out;
  for (std::size_t j = 0; j < kJoints; ++j) {
    out[j] = root + m.scale[i] * Vec3(g[3 * j], g[3 * j + 1], g[3 * j + 2]);
  }
  return out;
}

// Largest reprojection error over the whole dataset, in pixels.
inline double max_reprojection_error(const Dataset& ds) {
  double worst = 0;
  for (std::size_t s = 0; s < ds.size(); ++s)
    for (std::size_t i = 0; i < ds.length; ++i) {
      const auto p = project(unnormalized_joints(ds, s, i), ds.cameras[ds.meta[s].camera[i]]);
      const float* g = ds.joints2d(s, i);
      for (std::size_t j = 0; j < kJoints; ++j) {
        worst = std::max({worst, std::abs(p[j].x() - g[2 * j]), std::abs(p[j].y() - g[2 * j + 1])});
      }
    }
  return worst;
}

// ---------------------------------------------------------------------------
// Splits

enum class SplitBy { subject, activity };

inline SplitBy split_from(const std::string& s) {
  if (s == "subject") return SplitBy::subject;
  if (s == "activity") return SplitBy::activity;
  throw ContractError("split must be 'subject' or 'activity', got '" + s + "'");
}

struct Split {
  std::vector<std::size_t> train, test;
};

// Samples whose subject (or activity) id is in `test_ids` go to test.
inline Split make_split(const Dataset& ds, SplitBy by, const std::vector<std::uint32_t>& test_ids) {
  Split s;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const auto id = by == SplitBy::subject ? ds.meta[i].subject : ds.meta[i].activity;
    const bool test = std::find(test_ids.begin(), test_ids.end(), id) != test_ids.end();
    (test ? s.test : s.train).push_back(i);
  }
  return s;
}

inline std::string split_manifest(const Dataset& ds, const Split& s) {
  std::vector<const char*> tag(ds.size(), "");
  for (const auto i : s.train) tag[i] = "train";
  for (const auto i : s.test) tag[i] = "test";
  std::string out = "index,subject,activity,split\n";
  for (std::size_t i = 0; i < ds.size(); ++i) {
    out += std::to_string(i) + "," + std::to_string(ds.meta[i].subject) + "," +
           std::to_string(ds.meta[i].activity) + "," + tag[i] + "\n";
  }
  return out;
}

// ---------------------------------------------------------------------------
// STHD file

inline constexpr std::uint32_t kDatasetVersion = 1;

inline std::vector<std::uint8_t> encode_dataset(const Dataset& ds) {
  io::Writer w;
  w.magic("STHD");
  w.u32(kDatasetVersion);
  w.u32(static_cast<std::uint32_t>(ds.mode));
  for (const auto v : {ds.length, ds.img_h, ds.img_w, ds.channels, ds.subjects, ds.activities, ds.sequences}) {
    w.u32(static_cast<std::uint32_t>(v));
  }
  w.u32(static_cast<std::uint32_t>(ds.cameras.size()));
  for (const auto& c : ds.cameras) {
    for (const double v : {c.fx, c.fy, c.cx, c.cy}) w.f64(v);
    for (int r = 0; r < 3; ++r)
      for (int k = 0; k < 3; ++k) w.f64(c.rotation(r, k));
    for (int k = 0; k < 3; ++k) w.f64(c.center[k]);
  }
  w.u32(static_cast<std::uint32_t>(ds.size()));
  const std::size_t fs = ds.frame_size(), n = ds.length;
  for (std::size_t s = 0; s < ds.size(); ++s) {
    const auto& m = ds.meta[s];
    w.u32(m.subject);
    w.u32(m.activity);
    w.u32(m.sequence);
    for (std::size_t i = 0; i < n; ++i) {
      w.u32(m.camera[i]);
      w.i32(m.occluded[i]);
      for (const double v : m.root[i]) w.f64(v);
      w.f64(m.scale[i]);
    }
    w.f32s(std::span(ds.frames).subspan(s * n * fs, n * fs));
    w.f32s(std::span(ds.gt2d).subspan(s * n * kJoints * 2, n * kJoints * 2));
    w.f32s(std::span(ds.gt3d).subspan(s * n * kJoints * 3, n * kJoints * 3));
  }
  return w.finish();
}

inline Dataset decode_dataset(std::vector<std::uint8_t> bytes, const std::string& what) {
  io::Reader r(std::move(bytes), what);
  r.expect_magic("STHD");
  if (const auto v = r.u32(); v != kDatasetVersion) r.fail("unsupported dataset version " + std::to_string(v));
  Dataset ds;
  const auto mode = r.u32();
  if (mode > 1) r.fail("unknown mode " + std::to_string(mode));
  ds.mode = static_cast<Mode>(mode);
  for (auto* v : {&ds.length, &ds.img_h, &ds.img_w, &ds.channels, &ds.subjects, &ds.activities, &ds.sequences}) {
    *v = r.u32();
  }
  if (ds.channels != 3 || ds.length == 0) r.fail("invalid header");
  ds.cameras.resize(r.u32());
  for (auto& c : ds.cameras) {
    for (double* v : {&c.fx, &c.fy, &c.cx, &c.cy}) *v = r.f64();
    for (int i = 0; i < 3; ++i)
      for (int k = 0; k < 3; ++k) c.rotation(i, k) = r.f64();
    for (int k = 0; k < 3; ++k) c.center[k] = r.f64();
  }
  const std::size_t count = r.u32(), n = ds.length, fs = ds.frame_size();
  const std::size_t per_sample = 12 + n * 40 + 4 * n * (fs + kJoints * 5);
  if (per_sample * count != r.remaining()) r.fail("sample count does not match file size");
  ds.meta.resize(count);
  ds.frames.resize(count * n * fs);
  ds.gt2d.resize(count * n * kJoints * 2);
  ds.gt3d.resize(count * n * kJoints * 3);
  for (std::size_t s = 0; s < count; ++s) {
    auto& m = ds.meta[s];
    m.subject = r.u32();
    m.activity = r.u32();
    m.sequence = r.u32();
    m.camera.resize(n);
    m.occluded.resize(n);
    m.root.resize(n);
    m.scale.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
      m.camera[i] = r.u32();
      if (m.camera[i] >= ds.cameras.size()) r.fail("camera id out of range");
      m.occluded[i] = r.i32();
      for (auto& v : m.root[i]) v = r.f64();
      m.scale[i] = r.f64();
    }
    r.f32s(ds.frames.data() + s * n * fs, n * fs);
    r.f32s(ds.gt2d.data() + s * n * kJoints * 2, n * kJoints * 2);
    r.f32s(ds.gt3d.data() + s * n * kJoints * 3, n * kJoints * 3);
  }
  return ds;
}

inline void save_dataset(const std::string& path, const Dataset& ds) { io::write_file(path, encode_dataset(ds)); }

inline Dataset load_dataset(const std::string& path) { return decode_dataset(io::read_file(path), path); }

}  // namespace seqhand::data
