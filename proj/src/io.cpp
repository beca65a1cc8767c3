#include "ilab/io.hpp"

#include <charconv>
#include <fstream>
#include <sstream>

#include <json.hpp>

namespace ilab {

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> fields;
    std::string field;
    std::stringstream ss(line);
    while (std::getline(ss, field, ',')) {
        fields.push_back(field);
    }
    if (!line.empty() && line.back() == ',') fields.push_back("");
    return fields;
}

double parse_double(const std::string& s, const std::string& context) {
    double value = 0.0;
    const char* begin = s.data();
    const char* end = begin + s.size();
    while (begin < end && (*begin == ' ' || *begin == '\t')) ++begin;
    auto [ptr, ec] = std::from_chars(begin, end, value);
    if (ec != std::errc{} || ptr != end) {
        throw data_error(context + ": cannot parse number '" + s + "'");
    }
    if (!std::isfinite(value)) {
        throw data_error(context + ": non-finite value '" + s + "'");
    }
    return value;
}

}  // namespace

Dataset load_dataset(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw data_error("load_dataset: cannot open " + path.string());

    std::string line;
    if (!std::getline(in, line)) throw data_error("load_dataset: empty file " + path.string());
    if (!line.empty() && line.back() == '\r') line.pop_back();

    const auto header = split_csv_line(line);
    if (header.size() < 2 || header.back() != "y") {
        throw data_error("load_dataset: header must be x0,...,x{d-1},y, got '" + line + "'");
    }
    const int d_in = static_cast<int>(header.size()) - 1;
    for (int i = 0; i < d_in; ++i) {
        if (header[i] != "x" + std::to_string(i)) {
            throw data_error("load_dataset: expected header column x" + std::to_string(i) +
                             ", got '" + header[i] + "'");
        }
    }

    Dataset data;
    data.d_in = d_in;
    int line_number = 1;
    while (std::getline(in, line)) {
        ++line_number;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        const auto fields = split_csv_line(line);
        const std::string context = path.string() + ":" + std::to_string(line_number);
        if (static_cast<int>(fields.size()) != d_in + 1) {
            throw data_error(context + ": expected " + std::to_string(d_in + 1) +
                             " fields, got " + std::to_string(fields.size()));
        }
        RawPoint z;
        z.x.resize(d_in);
        for (int i = 0; i < d_in; ++i) {
            z.x(i) = parse_double(fields[i], context);
        }
        if (fields[d_in] == "0") {
            z.label = 0;
        } else if (fields[d_in] == "1") {
            z.label = 1;
        } else {
            throw data_error(context + ": label must be 0 or 1, got '" + fields[d_in] + "'");
        }
        data.points.push_back(std::move(z));
    }
    return data;
}

void save_dataset(const Dataset& data, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw data_error("save_dataset: cannot write " + path.string());
    for (int i = 0; i < data.d_in; ++i) out << "x" << i << ",";
    out << "y\n";
    char buf[64];
    for (const auto& z : data.points) {
        for (int i = 0; i < data.d_in; ++i) {
            const auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), z.x(i));
            out.write(buf, ptr - buf);
            out << ',';
        }
        out << z.label << '\n';
    }
    if (!out) throw data_error("save_dataset: write failed for " + path.string());
}

void save_params(const ParamVector& params, const std::filesystem::path& path) {
    nlohmann::json j;
    j["layout"] = {{"d_in", params.layout().d_in},
                   {"feature_dim", params.layout().feature_dim},
                   {"mu", params.layout().total()},
                   {"mu_c", params.layout().classifier_count()}};
    j["values"] = std::vector<double>(params.values().data(),
                                      params.values().data() + params.values().size());
    std::ofstream out(path);
    if (!out) throw data_error("save_params: cannot write " + path.string());
    out << j.dump(2) << '\n';
}

ParamVector load_params(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw data_error("load_params: cannot open " + path.string());
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw data_error("load_params: invalid JSON in " + path.string() + ": " + e.what());
    }
    ParamLayout layout;
    layout.d_in = j.at("layout").at("d_in").get<int>();
    layout.feature_dim = j.at("layout").at("feature_dim").get<int>();
    const auto values = j.at("values").get<std::vector<double>>();
    if (static_cast<int>(values.size()) != layout.total()) {
        throw data_error("load_params: value count does not match layout in " + path.string());
    }
    Vector v(values.size());
    for (size_t i = 0; i < values.size(); ++i) v(i) = values[i];
    return ParamVector(layout, std::move(v));
}

}  // namespace ilab
