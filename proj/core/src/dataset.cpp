#include "tsr/dataset.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

namespace tsr {

int DatasetManifest::class_id(const std::string& name) const {
  for (std::size_t i = 0; i < class_names.size(); ++i)
    if (class_names[i] == name) return int(i) + 1;
  throw DataError("unknown class: " + name);
}

std::string DatasetManifest::image_file(const DatasetEntry& e) const {
  if (base_dir.empty()) return e.image_path;
  return (std::filesystem::path(base_dir) / e.image_path).string();
}

namespace {

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : s) {
    if (ch == sep) {
      out.push_back(cur);
      cur.clear();
    } else {
      cur += ch;
    }
  }
  out.push_back(cur);
  return out;
}

std::string trim(const std::string& s) {
  std::size_t a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  std::size_t b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

[[noreturn]] void fail(const std::string& origin, int line, const std::string& what) {
  throw DataError(origin + ":" + std::to_string(line) + ": " + what);
}

}  // namespace

DatasetManifest parse_manifest_text(std::istream& is, const std::string& origin) {
  DatasetManifest m;
  std::map<std::string, int> entry_index;
  std::string line;
  int lineno = 0;
  bool classes_seen = false;
  while (std::getline(is, line)) {
    ++lineno;
    line = trim(line);
    if (line.empty() || line[0] == '#') continue;
    if (line[0] == '@') {
      const auto sp = line.find(' ');
      const std::string key = line.substr(0, sp);
      const std::string val = sp == std::string::npos ? "" : trim(line.substr(sp + 1));
      if (key == "@classes") {
        m.class_names = split(val, ',');
        for (std::string& n : m.class_names) n = trim(n);
        if (m.class_names.size() != 10)
          fail(origin, lineno, "@classes must list exactly 10 names, got " +
                                   std::to_string(m.class_names.size()));
        classes_seen = true;
      } else if (key == "@split") {
        if (val == "train")
          m.split = DatasetManifest::Split::Train;
        else if (val == "test")
          m.split = DatasetManifest::Split::Test;
        else
          fail(origin, lineno, "@split must be train or test");
      } else {
        fail(origin, lineno, "unknown directive " + key);
      }
      continue;
    }
    const std::vector<std::string> f = split(line, ';');
    const std::string path = trim(f[0]);
    if (path.empty()) fail(origin, lineno, "empty image path");
    auto [it, inserted] = entry_index.try_emplace(path, int(m.entries.size()));
    if (inserted) m.entries.push_back(DatasetEntry{path, {}});
    DatasetEntry& entry = m.entries[it->second];
    if (f.size() == 1) continue;  // negative image declaration
    if (f.size() != 4) fail(origin, lineno, "expected path;class;visibility;coords");
    if (!classes_seen) fail(origin, lineno, "annotation before @classes");
    Annotation a;
    a.image_id = path;
    try {
      a.class_id = m.class_id(trim(f[1]));
      a.visibility = visibility_from_name(trim(f[2]));
    } catch (const DataError& e) {
      fail(origin, lineno, e.what());
    }
    const std::vector<std::string> c = split(trim(f[3]), ',');
    if (c.size() != 4) fail(origin, lineno, "coords must be x_min,y_min,x_max,y_max");
    try {
      a.box = BBox{std::stod(c[0]), std::stod(c[1]), std::stod(c[2]), std::stod(c[3])};
    } catch (const std::exception&) {
      fail(origin, lineno, "bad coordinate number");
    }
    if (!a.box.valid()) fail(origin, lineno, "box must satisfy x_min < x_max and y_min < y_max");
    entry.annotations.push_back(std::move(a));
  }
  if (!classes_seen && !m.entries.empty()) throw DataError(origin + ": missing @classes directive");
  return m;
}

DatasetManifest parse_manifest(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw DataError("cannot open: " + path);
  DatasetManifest m = parse_manifest_text(is, path);
  m.base_dir = std::filesystem::path(path).parent_path().string();
  return m;
}

void write_manifest_text(std::ostream& os, const DatasetManifest& m) {
  os << "@classes ";
  for (std::size_t i = 0; i < m.class_names.size(); ++i)
    os << (i ? "," : "") << m.class_names[i];
  os << "\n@split " << (m.split == DatasetManifest::Split::Train ? "train" : "test") << "\n";
  for (const DatasetEntry& e : m.entries) {
    if (e.annotations.empty()) {
      os << e.image_path << "\n";
      continue;
    }
    for (const Annotation& a : e.annotations) {
      os << e.image_path << ";" << m.class_names[a.class_id - 1] << ";"
         << visibility_name(a.visibility) << ";" << a.box.x_min << "," << a.box.y_min << ","
         << a.box.x_max << "," << a.box.y_max << "\n";
    }
  }
}

void write_manifest(const std::string& path, const DatasetManifest& m) {
  std::ofstream os(path);
  if (!os) throw DataError("cannot open for writing: " + path);
  write_manifest_text(os, m);
  if (!os) throw DataError("write failed: " + path);
}

}  // namespace tsr
