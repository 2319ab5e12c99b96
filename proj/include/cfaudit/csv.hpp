#pragma once

#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace cfaudit::csv {

using Row = std::vector<std::string>;

// RFC 4180 style reader: quoted fields, doubled quotes, CRLF tolerated.
std::vector<Row> parse(std::string_view text);
std::vector<Row> read_file(const std::filesystem::path& path);

std::string escape(std::string_view field);
std::string format_row(const Row& row);

// Shortest round-trip decimal representation.
std::string format_number(double value);

}  // namespace cfaudit::csv
