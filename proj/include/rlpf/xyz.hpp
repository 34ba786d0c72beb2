#pragma once

#include "rlpf/core.hpp"

#include <string>

namespace rlpf {

// "n\ncomment\nSYM x y z\n..." with coordinates at 9 significant digits.
std::string write_xyz(const Molecule& mol, const AtomTable& table, const std::string& comment = "");

// Throws ParseError on malformed input or symbols missing from `table`.
Molecule read_xyz(const std::string& text, const AtomTable& table, std::string* comment = nullptr);

Molecule read_xyz_file(const std::string& path, const AtomTable& table);
void write_xyz_file(const std::string& path, const Molecule& mol, const AtomTable& table,
                    const std::string& comment = "");

}  // namespace rlpf
