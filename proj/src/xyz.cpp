#include "rlpf/xyz.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>

namespace rlpf {

std::string write_xyz(const Molecule& mol, const AtomTable& table, const std::string& comment) {
  if (comment.find('\n') != std::string::npos) throw Error("write_xyz: comment must be a single line");
  const auto rows = mol.atoms();
  std::string out = std::to_string(rows.size()) + "\n" + comment + "\n";
  char buf[160];
  for (int i : rows) {
    std::snprintf(buf, sizeof buf, "%s %.9g %.9g %.9g\n", table.symbol(mol.element(i)).c_str(),
                  mol.coords(i, 0), mol.coords(i, 1), mol.coords(i, 2));
    out += buf;
  }
  return out;
}

Molecule read_xyz(const std::string& text, const AtomTable& table, std::string* comment) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line)) throw ParseError("xyz: missing atom count");
  int n = 0;
  {
    std::istringstream ls(line);
    if (!(ls >> n) || n < 0) throw ParseError("xyz: bad atom count '" + line + "'");
    std::string rest;
    if (ls >> rest) throw ParseError("xyz: trailing text after atom count");
  }
  if (!std::getline(in, line)) throw ParseError("xyz: missing comment line");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (comment) *comment = line;

  std::vector<int> elements;
  Coords coords(n, 3);
  for (int i = 0; i < n; ++i) {
    if (!std::getline(in, line)) throw ParseError("xyz: expected " + std::to_string(n) + " atom lines");
    std::istringstream ls(line);
    std::string sym;
    double x, y, z;
    if (!(ls >> sym >> x >> y >> z)) throw ParseError("xyz: malformed atom line '" + line + "'");
    const int e = table.index_of(sym);
    if (e < 0) throw ParseError("xyz: unknown element '" + sym + "'");
    elements.push_back(e);
    coords.row(i) << x, y, z;
  }
  while (std::getline(in, line))
    if (line.find_first_not_of(" \t\r") != std::string::npos)
      throw ParseError("xyz: unexpected content after atom block");
  return Molecule::from_elements(elements, coords, table.num_elements());
}

Molecule read_xyz_file(const std::string& path, const AtomTable& table) {
  std::ifstream f(path);
  if (!f) throw Error("cannot open " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  return read_xyz(ss.str(), table);
}

void write_xyz_file(const std::string& path, const Molecule& mol, const AtomTable& table,
                    const std::string& comment) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw Error("cannot write " + path);
  f << write_xyz(mol, table, comment);
}

}  // namespace rlpf
