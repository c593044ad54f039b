// JSON-lines detections: one {"image_id","class_id","score","box":[x1,y1,x2,y2]} per line.
#pragma once

#include <array>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "mnx/box.hpp"

namespace mnx::inline MNX_ABI {

class DetectionsFormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline std::string detection_to_json_line(const Detection& d) {
  const nlohmann::json j = {{"image_id", d.image_id},
                            {"class_id", d.class_id},
                            {"score", d.score},
                            {"box", {d.box.x1, d.box.y1, d.box.x2, d.box.y2}}};
  return j.dump();
}

inline void write_detections(std::ostream& os, const std::vector<Detection>& dets) {
  for (const auto& d : dets) os << detection_to_json_line(d) << '\n';
}

inline std::vector<Detection> read_detections(std::istream& is, const std::string& source = "detections") {
  std::vector<Detection> out;
  std::string line;
  for (int lineno = 1; std::getline(is, line); ++lineno) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      Detection d;
      d.image_id = j.at("image_id").get<std::int64_t>();
      d.class_id = j.at("class_id").get<int>();
      d.score = j.at("score").get<float>();
      const auto b = j.at("box").get<std::array<float, 4>>();
      d.box = {b[0], b[1], b[2], b[3]};
      out.push_back(d);
    } catch (const nlohmann::json::exception& e) {
      throw DetectionsFormatError(source + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

inline void save_detections(const std::vector<Detection>& dets, const std::string& path) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw DetectionsFormatError("cannot write '" + path + "'");
  write_detections(os, dets);
}

inline std::vector<Detection> load_detections(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw DetectionsFormatError("cannot open '" + path + "'");
  return read_detections(is, path);
}

}  // namespace mnx
