#include "bridgeseg/tensor_io.hpp"

#include <cstring>
#include <fstream>
#include <stdexcept>

namespace bridgeseg {

namespace {
constexpr char kMagic[8] = {'B', 'S', 'E', 'G', 'T', 'N', 'S', '1'};
}

void TensorFile::add(std::string name, Tensor t, bool frozen, std::string adapter_of) {
    if (find(name)) throw std::invalid_argument("duplicate tensor name: " + name);
    entries.push_back({std::move(name), std::move(t), frozen, std::move(adapter_of)});
}

const TensorEntry* TensorFile::find(const std::string& name) const {
    for (const auto& e : entries) {
        if (e.name == name) return &e;
    }
    return nullptr;
}

const Tensor& TensorFile::require(const std::string& name) const {
    const TensorEntry* e = find(name);
    if (!e) throw std::runtime_error("tensor not found in container: " + name);
    return e->tensor;
}

void TensorFile::save(const std::filesystem::path& path) const {
    nlohmann::json header;
    header["meta"] = meta;
    nlohmann::json list = nlohmann::json::array();
    uint64_t offset = 0;
    for (const auto& e : entries) {
        nlohmann::json j;
        j["name"] = e.name;
        j["shape"] = e.tensor.shape;
        j["dtype"] = "f64";
        j["offset"] = offset;
        j["frozen"] = e.frozen;
        if (!e.adapter_of.empty()) j["adapter_of"] = e.adapter_of;
        list.push_back(std::move(j));
        offset += static_cast<uint64_t>(e.tensor.numel()) * sizeof(double);
    }
    header["tensors"] = std::move(list);
    const std::string header_str = header.dump();
    if (header_str.size() > 0xffffffffULL) throw std::runtime_error("header too large");

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open for writing: " + path.string());
    out.write(kMagic, sizeof(kMagic));
    uint32_t len = static_cast<uint32_t>(header_str.size());
    unsigned char len_le[4] = {
        static_cast<unsigned char>(len & 0xff),
        static_cast<unsigned char>((len >> 8) & 0xff),
        static_cast<unsigned char>((len >> 16) & 0xff),
        static_cast<unsigned char>((len >> 24) & 0xff),
    };
    out.write(reinterpret_cast<const char*>(len_le), 4);
    out.write(header_str.data(), static_cast<std::streamsize>(header_str.size()));
    for (const auto& e : entries) {
        out.write(reinterpret_cast<const char*>(e.tensor.data.data()),
                  static_cast<std::streamsize>(e.tensor.data.size() * sizeof(double)));
    }
    if (!out) throw std::runtime_error("write failed: " + path.string());
}

TensorFile TensorFile::load(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open tensor container: " + path.string());

    char magic[8];
    in.read(magic, 8);
    if (!in || std::memcmp(magic, kMagic, 8) != 0) {
        throw std::runtime_error("bad tensor container magic: " + path.string());
    }
    unsigned char len_le[4];
    in.read(reinterpret_cast<char*>(len_le), 4);
    if (!in) throw std::runtime_error("truncated container header: " + path.string());
    uint32_t len = static_cast<uint32_t>(len_le[0]) | (static_cast<uint32_t>(len_le[1]) << 8) |
                   (static_cast<uint32_t>(len_le[2]) << 16) | (static_cast<uint32_t>(len_le[3]) << 24);

    std::string header_str(len, '\0');
    in.read(header_str.data(), len);
    if (!in) throw std::runtime_error("truncated container header: " + path.string());
    nlohmann::json header = nlohmann::json::parse(header_str);

    const std::streampos payload_start = in.tellg();
    TensorFile tf;
    tf.meta = header.value("meta", nlohmann::json::object());
    for (const auto& j : header.at("tensors")) {
        TensorEntry e;
        e.name = j.at("name").get<std::string>();
        e.frozen = j.value("frozen", false);
        e.adapter_of = j.value("adapter_of", std::string{});
        std::vector<int> shape = j.at("shape").get<std::vector<int>>();
        const std::string dtype = j.at("dtype").get<std::string>();
        const uint64_t offset = j.at("offset").get<uint64_t>();

        e.tensor = Tensor(shape);
        in.seekg(payload_start + static_cast<std::streamoff>(offset));
        if (dtype == "f64") {
            in.read(reinterpret_cast<char*>(e.tensor.data.data()),
                    static_cast<std::streamsize>(e.tensor.data.size() * sizeof(double)));
        } else if (dtype == "f32") {
            std::vector<float> buf(e.tensor.data.size());
            in.read(reinterpret_cast<char*>(buf.data()),
                    static_cast<std::streamsize>(buf.size() * sizeof(float)));
            for (size_t i = 0; i < buf.size(); ++i) e.tensor.data[i] = buf[i];
        } else {
            throw std::runtime_error("unsupported dtype in container: " + dtype);
        }
        if (!in) throw std::runtime_error("truncated tensor payload: " + path.string());
        tf.entries.push_back(std::move(e));
    }
    return tf;
}

}  // namespace bridgeseg
