#pragma once

// On-disk task layout:
//
//   <dir>/manifest.csv      filename,split,class,env
//   <dir>/task.json         K, N, rho, test_mode, seed, class_ids, shape
//   <dir>/<split>_<i>.pgm   binary PGM (P5), maxval 65535, big-endian samples
//
// A value v in [-1, 1] is stored as round((v + 1) / 2 * 65535). Images with
// C > 1 channels are stacked vertically, giving a W x (C*H) raster.

#include "tif/image.hpp"
#include "tif/worldgen.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace tif {

inline std::uint16_t quantize(float v) {
  const double c = std::clamp(static_cast<double>(v), -1.0, 1.0);
  return static_cast<std::uint16_t>(std::lround((c + 1.0) / 2.0 * 65535.0));
}

inline float dequantize(std::uint16_t q) {
  return static_cast<float>(static_cast<double>(q) / 65535.0 * 2.0 - 1.0);
}

inline void write_pgm(const std::filesystem::path& path, const Image& img) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("write_pgm: cannot open " + path.string());
  const auto& s = img.shape();
  os << "P5\n" << s.width << ' ' << s.channels * s.height << "\n65535\n";
  std::vector<unsigned char> buf(img.size() * 2);
  for (std::size_t i = 0; i < img.size(); ++i) {
    const auto q = quantize(img[i]);
    buf[2 * i] = static_cast<unsigned char>(q >> 8);
    buf[2 * i + 1] = static_cast<unsigned char>(q & 0xFF);
  }
  os.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (!os) throw std::runtime_error("write_pgm: write failed for " + path.string());
}

namespace detail {
inline int read_pgm_int(std::istream& is) {
  int c = is.peek();
  while (c == '#' || std::isspace(c)) {
    if (c == '#') {
      std::string skip;
      std::getline(is, skip);
    } else {
      is.get();
    }
    c = is.peek();
  }
  int v = 0;
  if (!(is >> v)) throw std::runtime_error("read_pgm: malformed header");
  return v;
}
}  // namespace detail

/// Reads a P5 16-bit PGM; `channels` splits the raster rows into planes.
inline Image read_pgm(const std::filesystem::path& path, int channels = 1) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("read_pgm: cannot open " + path.string());
  std::string magic;
  is >> magic;
  if (magic != "P5") throw std::runtime_error("read_pgm: " + path.string() + " is not a binary PGM");
  const int w = detail::read_pgm_int(is);
  const int h = detail::read_pgm_int(is);
  const int maxval = detail::read_pgm_int(is);
  if (maxval != 65535) throw std::runtime_error("read_pgm: expected maxval 65535 in " + path.string());
  is.get();  // single whitespace before the raster
  if (channels < 1 || h % channels != 0) throw std::runtime_error("read_pgm: bad channel count");
  Image img(Shape{channels, h / channels, w});
  std::vector<unsigned char> buf(img.size() * 2);
  is.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (is.gcount() != static_cast<std::streamsize>(buf.size())) {
    throw std::runtime_error("read_pgm: truncated raster in " + path.string());
  }
  for (std::size_t i = 0; i < img.size(); ++i) {
    img[i] = dequantize(static_cast<std::uint16_t>((buf[2 * i] << 8) | buf[2 * i + 1]));
  }
  return img;
}

inline void write_task(const std::filesystem::path& dir, const FewShotTask& task) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  std::ofstream manifest(dir / "manifest.csv");
  if (!manifest) throw std::runtime_error("write_task: cannot write " + (dir / "manifest.csv").string());
  manifest << "filename,split,class,env\n";
  auto emit = [&](const std::vector<Sample>& samples, const char* split) {
    for (std::size_t i = 0; i < samples.size(); ++i) {
      std::ostringstream name;
      name << split << '_' << std::setw(5) << std::setfill('0') << i << ".pgm";
      write_pgm(dir / name.str(), samples[i].image);
      manifest << name.str() << ',' << split << ',' << samples[i].label << ',' << samples[i].env << '\n';
    }
  };
  emit(task.train, "train");
  emit(task.test, "test");

  const Shape shape = task.train.empty() ? Shape{} : task.train.front().image.shape();
  nlohmann::ordered_json meta = {
      {"K", task.K},
      {"N", task.N},
      {"rho", task.rho},
      {"test_mode", to_string(task.test_mode)},
      {"seed", task.seed},
      {"class_ids", task.class_ids},
      {"shape", {shape.channels, shape.height, shape.width}},
  };
  std::ofstream(dir / "task.json") << meta.dump(2) << '\n';
}

inline FewShotTask read_task(const std::filesystem::path& dir) {
  std::ifstream meta_in(dir / "task.json");
  if (!meta_in) throw std::runtime_error("read_task: missing " + (dir / "task.json").string());
  const auto meta = nlohmann::json::parse(meta_in);
  FewShotTask task;
  task.K = meta.at("K").get<int>();
  task.N = meta.at("N").get<int>();
  task.rho = meta.at("rho").get<double>();
  task.test_mode = parse_test_mode(meta.at("test_mode").get<std::string>());
  task.seed = meta.at("seed").get<std::uint64_t>();
  task.class_ids = meta.at("class_ids").get<std::vector<int>>();
  const int channels = meta.at("shape").at(0).get<int>();

  std::ifstream manifest(dir / "manifest.csv");
  if (!manifest) throw std::runtime_error("read_task: missing " + (dir / "manifest.csv").string());
  std::string line;
  std::getline(manifest, line);
  if (line != "filename,split,class,env") throw std::runtime_error("read_task: unexpected manifest header");
  while (std::getline(manifest, line)) {
    if (line.empty()) continue;
    std::istringstream row(line);
    std::string file, split, cls, env;
    std::getline(row, file, ',');
    std::getline(row, split, ',');
    std::getline(row, cls, ',');
    std::getline(row, env, ',');
    Sample s{read_pgm(dir / file, channels), std::stoi(cls), std::stoi(env)};
    if (split == "train") {
      task.train.push_back(std::move(s));
    } else if (split == "test") {
      task.test.push_back(std::move(s));
    } else {
      throw std::runtime_error("read_task: unknown split '" + split + "'");
    }
  }
  return task;
}

}  // namespace tif
