#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <opencv2/imgcodecs.hpp>

#include "jneus/scene.hpp"

namespace jneus {

namespace fs = std::filesystem;

// Float-grid container for normal maps: 16-byte header (magic, width, height,
// channels as u32 little-endian) followed by row-major float32 data.
inline constexpr uint32_t kFloatGridMagic = 0x4746'4e4aU;  // "JNFG"

inline void write_float_grid(const fs::path& path, int width, int height,
                             int channels, const std::vector<float>& data) {
  if (data.size() != size_t(width) * height * channels)
    throw IoError("float grid size mismatch: " + path.string());
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open for write: " + path.string());
  uint32_t hdr[4] = {kFloatGridMagic, uint32_t(width), uint32_t(height),
                     uint32_t(channels)};
  os.write(reinterpret_cast<const char*>(hdr), sizeof hdr);
  os.write(reinterpret_cast<const char*>(data.data()),
           std::streamsize(data.size() * sizeof(float)));
  if (!os) throw IoError("write failed: " + path.string());
}

inline std::vector<float> read_float_grid(const fs::path& path, int& width,
                                          int& height, int& channels) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open: " + path.string());
  uint32_t hdr[4];
  is.read(reinterpret_cast<char*>(hdr), sizeof hdr);
  if (!is || hdr[0] != kFloatGridMagic)
    throw IoError("not a float grid: " + path.string());
  width = int(hdr[1]);
  height = int(hdr[2]);
  channels = int(hdr[3]);
  std::vector<float> data(size_t(width) * height * channels);
  is.read(reinterpret_cast<char*>(data.data()),
          std::streamsize(data.size() * sizeof(float)));
  if (!is) throw IoError("truncated float grid: " + path.string());
  return data;
}

// ---------------------------------------------------------------------------
// PNG helpers (OpenCV stores BGR; all in-memory data is RGB)

inline void write_rgb_png(const fs::path& path, int width, int height,
                          const std::vector<float>& rgb) {
  cv::Mat img(height, width, CV_8UC3);
  for (int v = 0; v < height; ++v)
    for (int u = 0; u < width; ++u) {
      size_t i = (size_t(v) * width + u) * 3;
      auto& px = img.at<cv::Vec3b>(v, u);
      for (int c = 0; c < 3; ++c)
        px[2 - c] = uint8_t(std::lround(std::clamp(rgb[i + c], 0.0f, 1.0f) * 255.0f));
    }
  if (!cv::imwrite(path.string(), img)) throw IoError("png write failed: " + path.string());
}

inline std::vector<float> read_rgb_png(const fs::path& path, int& width, int& height) {
  cv::Mat img = cv::imread(path.string(), cv::IMREAD_COLOR);
  if (img.empty()) throw IoError("png read failed: " + path.string());
  width = img.cols;
  height = img.rows;
  std::vector<float> rgb(size_t(width) * height * 3);
  for (int v = 0; v < height; ++v)
    for (int u = 0; u < width; ++u) {
      const auto& px = img.at<cv::Vec3b>(v, u);
      size_t i = (size_t(v) * width + u) * 3;
      for (int c = 0; c < 3; ++c) rgb[i + c] = float(px[2 - c]) / 255.0f;
    }
  return rgb;
}

inline void write_gray_png(const fs::path& path, int width, int height,
                           const std::vector<uint8_t>& data) {
  cv::Mat img(height, width, CV_8UC1, const_cast<uint8_t*>(data.data()));
  if (!cv::imwrite(path.string(), img)) throw IoError("png write failed: " + path.string());
}

inline std::vector<uint8_t> read_gray_png(const fs::path& path, int& width,
                                          int& height) {
  cv::Mat img = cv::imread(path.string(), cv::IMREAD_GRAYSCALE);
  if (img.empty()) throw IoError("png read failed: " + path.string());
  width = img.cols;
  height = img.rows;
  std::vector<uint8_t> data(size_t(width) * height);
  for (int v = 0; v < height; ++v)
    for (int u = 0; u < width; ++u) data[size_t(v) * width + u] = img.at<uint8_t>(v, u);
  return data;
}

// ---------------------------------------------------------------------------
// LiDAR point cloud PLY: binary little-endian xyz float32 + uchar label,
// class names documented in header comments.

inline void export_lidar_ply(const LidarCloud& cloud, const fs::path& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open for write: " + path.string());
  os << "ply\nformat binary_little_endian 1.0\n";
  for (int c = 0; c < kNumSemClasses; ++c)
    os << "comment label " << c << " " << sem_class_name(SemClass(c)) << "\n";
  os << "element vertex " << cloud.points.size() << "\n"
     << "property float x\nproperty float y\nproperty float z\n"
     << "property uchar label\nend_header\n";
  for (size_t i = 0; i < cloud.points.size(); ++i) {
    float xyz[3] = {float(cloud.points[i].x()), float(cloud.points[i].y()),
                    float(cloud.points[i].z())};
    os.write(reinterpret_cast<const char*>(xyz), sizeof xyz);
    os.write(reinterpret_cast<const char*>(&cloud.labels[i]), 1);
  }
  if (!os) throw IoError("write failed: " + path.string());
}

inline LidarCloud import_lidar_ply(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open: " + path.string());
  std::string line;
  size_t n = 0;
  bool ok = false, has_label = false;
  while (std::getline(is, line)) {
    if (line.rfind("element vertex ", 0) == 0) n = std::stoul(line.substr(15));
    if (line.rfind("property uchar label", 0) == 0) has_label = true;
    if (line == "end_header") {
      ok = true;
      break;
    }
  }
  if (!ok || !has_label) throw IoError("not a lidar ply: " + path.string());
  LidarCloud cloud;
  cloud.points.resize(n);
  cloud.labels.resize(n);
  for (size_t i = 0; i < n; ++i) {
    float xyz[3];
    is.read(reinterpret_cast<char*>(xyz), sizeof xyz);
    is.read(reinterpret_cast<char*>(&cloud.labels[i]), 1);
    cloud.points[i] = Vec3(xyz[0], xyz[1], xyz[2]);
  }
  if (!is) throw IoError("truncated lidar ply: " + path.string());
  return cloud;
}

// ---------------------------------------------------------------------------
// Dataset directory layout:
//   cameras.json                   intrinsics + 4x4 extrinsics + scene box
//   rgb/NNNN_CAM.png               8-bit color
//   normal/NNNN_CAM.bin            float grid, 3 channels
//   semantic/NNNN_CAM.png          u8 class labels
//   sky/NNNN_CAM.png               binary mask (255 = sky)
//   lidar.ply                      evaluation points + labels

struct Dataset {
  Aabb box;
  std::vector<Camera> cams;
  std::vector<GroundTruthFrame> frames;  // parallel to cams
  LidarCloud lidar;
};

inline nlohmann::json camera_to_json(const Camera& cam) {
  nlohmann::json j;
  j["name"] = cam.name;
  j["width"] = cam.width;
  j["height"] = cam.height;
  j["fx"] = cam.fx;
  j["fy"] = cam.fy;
  j["cx"] = cam.cx;
  j["cy"] = cam.cy;
  std::vector<double> m(16, 0.0);
  for (int r = 0; r < 3; ++r) {
    for (int c = 0; c < 3; ++c) m[size_t(r) * 4 + c] = cam.rot(r, c);
    m[size_t(r) * 4 + 3] = cam.origin[r];
  }
  m[15] = 1.0;
  j["cam_to_world"] = m;
  return j;
}

inline Camera camera_from_json(const nlohmann::json& j) {
  Camera cam;
  cam.name = j.at("name").get<std::string>();
  cam.width = j.at("width").get<int>();
  cam.height = j.at("height").get<int>();
  cam.fx = j.at("fx").get<double>();
  cam.fy = j.at("fy").get<double>();
  cam.cx = j.at("cx").get<double>();
  cam.cy = j.at("cy").get<double>();
  auto m = j.at("cam_to_world").get<std::vector<double>>();
  if (m.size() != 16) throw IoError("bad cam_to_world for " + cam.name);
  for (int r = 0; r < 3; ++r) {
    for (int c = 0; c < 3; ++c) cam.rot(r, c) = m[size_t(r) * 4 + c];
    cam.origin[r] = m[size_t(r) * 4 + 3];
  }
  return cam;
}

inline void write_dataset(const Dataset& ds, const fs::path& dir) {
  for (const char* sub : {"rgb", "normal", "semantic", "sky"})
    fs::create_directories(dir / sub);

  nlohmann::json root;
  root["box"] = {{"lo", {ds.box.lo.x(), ds.box.lo.y(), ds.box.lo.z()}},
                 {"hi", {ds.box.hi.x(), ds.box.hi.y(), ds.box.hi.z()}}};
  root["frames"] = nlohmann::json::array();
  for (const auto& cam : ds.cams) root["frames"].push_back(camera_to_json(cam));
  std::ofstream os(dir / "cameras.json");
  if (!os) throw IoError("cannot open for write: " + (dir / "cameras.json").string());
  os << root.dump(2) << "\n";
  if (!os) throw IoError("write failed: " + (dir / "cameras.json").string());

  for (size_t i = 0; i < ds.cams.size(); ++i) {
    const auto& cam = ds.cams[i];
    const auto& f = ds.frames[i];
    write_rgb_png(dir / "rgb" / (cam.name + ".png"), f.width, f.height, f.rgb);
    write_float_grid(dir / "normal" / (cam.name + ".bin"), f.width, f.height, 3,
                     f.normal);
    write_gray_png(dir / "semantic" / (cam.name + ".png"), f.width, f.height,
                   f.semantic);
    std::vector<uint8_t> sky255(f.sky.size());
    for (size_t k = 0; k < f.sky.size(); ++k) sky255[k] = f.sky[k] ? 255 : 0;
    write_gray_png(dir / "sky" / (cam.name + ".png"), f.width, f.height, sky255);
  }
  if (!ds.lidar.points.empty()) export_lidar_ply(ds.lidar, dir / "lidar.ply");
}

inline Dataset load_dataset(const fs::path& dir) {
  std::ifstream is(dir / "cameras.json");
  if (!is) throw IoError("missing dataset: " + (dir / "cameras.json").string());
  nlohmann::json root = nlohmann::json::parse(is);

  Dataset ds;
  auto& jb = root.at("box");
  for (int a = 0; a < 3; ++a) {
    ds.box.lo[a] = jb.at("lo")[size_t(a)].get<double>();
    ds.box.hi[a] = jb.at("hi")[size_t(a)].get<double>();
  }
  for (const auto& jc : root.at("frames")) ds.cams.push_back(camera_from_json(jc));

  for (const auto& cam : ds.cams) {
    GroundTruthFrame f;
    int w = 0, h = 0, ch = 0;
    f.rgb = read_rgb_png(dir / "rgb" / (cam.name + ".png"), w, h);
    f.width = w;
    f.height = h;
    f.normal = read_float_grid(dir / "normal" / (cam.name + ".bin"), w, h, ch);
    if (w != f.width || h != f.height || ch != 3)
      throw IoError("normal grid mismatch for " + cam.name);
    f.semantic = read_gray_png(dir / "semantic" / (cam.name + ".png"), w, h);
    auto sky255 = read_gray_png(dir / "sky" / (cam.name + ".png"), w, h);
    f.sky.resize(sky255.size());
    for (size_t k = 0; k < sky255.size(); ++k) f.sky[k] = sky255[k] ? 1 : 0;
    f.depth.assign(f.n_pixels(), kInf);  // depth is not part of the layout
    ds.frames.push_back(std::move(f));
  }
  if (fs::exists(dir / "lidar.ply")) ds.lidar = import_lidar_ply(dir / "lidar.ply");
  return ds;
}

}  // namespace jneus
