#include <fstream>
#include <sstream>

#include <boost/property_tree/ptree.hpp>
#include <boost/property_tree/xml_parser.hpp>

#include "icod/datagen.hpp"
#include "icod/errors.hpp"

namespace icod {
namespace {

namespace pt = boost::property_tree;

double coordinate(const pt::ptree& bndbox, const char* field, const std::string& where) {
  const auto node = bndbox.get_child_optional(field);
  if (!node) throw ParseError(where + "/bndbox/" + field + ": missing");
  try {
    return std::stod(node->data());
  } catch (const std::exception&) {
    throw ParseError(where + "/bndbox/" + field + ": not a number ('" + node->data() + "')");
  }
}

}  // namespace

std::vector<VocObject> load_voc_xml(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ParseError(path + ": cannot open");

  pt::ptree tree;
  try {
    pt::read_xml(in, tree, pt::xml_parser::trim_whitespace);
  } catch (const pt::xml_parser_error& e) {
    throw ParseError(path + ": malformed XML at line " + std::to_string(e.line()) + ": " + e.message());
  }
  const auto root = tree.get_child_optional("annotation");
  if (!root) throw ParseError(path + ": missing <annotation> root element");

  std::vector<VocObject> objects;
  int index = 0;
  for (const auto& [tag, node] : *root) {
    if (tag != "object") continue;
    const std::string where = "annotation/object[" + std::to_string(index++) + "]";
    VocObject obj;
    const auto name = node.get_child_optional("name");
    if (!name) throw ParseError(where + "/name: missing");
    obj.name = name->data();
    const auto bndbox = node.get_child_optional("bndbox");
    if (!bndbox) throw ParseError(where + "/bndbox: missing");
    obj.box = Box{coordinate(*bndbox, "xmin", where), coordinate(*bndbox, "ymin", where),
                  coordinate(*bndbox, "xmax", where), coordinate(*bndbox, "ymax", where)};
    objects.push_back(std::move(obj));
  }
  return objects;
}

}  // namespace icod
