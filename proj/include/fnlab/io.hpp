#pragma once

// Line-oriented file access. Reading goes through zlib, which passes plain
// files through unchanged and inflates gzip input transparently.

#include <zlib.h>

#include <cstddef>
#include <filesystem>
#include <fstream>
#include <functional>
#include <string>
#include <string_view>
#include <vector>

#include "fnlab/errors.hpp"

namespace fnlab {

// Calls `fn(line, line_number)` for every line, 1-based, without the newline.
inline void for_each_line(const std::filesystem::path& path,
                          const std::function<void(std::string_view, std::size_t)>& fn) {
  gzFile file = gzopen(path.c_str(), "rb");
  if (file == nullptr) throw IoError("cannot open " + path.string());
  std::string line;
  std::vector<char> buf(1 << 16);
  std::size_t line_no = 0;
  try {
    while (true) {
      const char* got = gzgets(file, buf.data(), static_cast<int>(buf.size()));
      if (got == nullptr) break;
      std::string_view chunk(got);
      line.append(chunk);
      if (!line.empty() && line.back() == '\n') {
        line.pop_back();
        if (!line.empty() && line.back() == '\r') line.pop_back();
        fn(line, ++line_no);
        line.clear();
      }
    }
    if (!line.empty()) fn(line, ++line_no);
  } catch (...) {
    gzclose(file);
    throw;
  }
  gzclose(file);
}

template <typename T, typename Parse>
std::vector<T> read_records(const std::filesystem::path& path, Parse parse) {
  std::vector<T> out;
  for_each_line(path, [&](std::string_view line, std::size_t no) {
    if (!line.empty()) out.push_back(parse(line, no));
  });
  return out;
}

inline void write_text_file(const std::filesystem::path& path, std::string_view content) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << content;
  if (!out) throw IoError("write failed for " + path.string());
}

template <typename T, typename Format>
void write_records(const std::filesystem::path& path, const std::vector<T>& items, Format format) {
  std::string text;
  for (const auto& item : items) {
    text += format(item);
    text += '\n';
  }
  write_text_file(path, text);
}

inline std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace fnlab
