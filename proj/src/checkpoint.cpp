#include "focc/checkpoint.hpp"

#include <cstdint>
#include <cstring>
#include <fstream>

namespace focc {

namespace {

constexpr char kMagic[8] = {'F', 'O', 'C', 'K', 'P', 'T', '1', '\n'};

void write_u32(std::ofstream &out, uint32_t v) {
    out.write(reinterpret_cast<const char *>(&v), 4);
}

}  // namespace

void save_checkpoint(const std::string &path, const ParamRegistry &reg) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw ConfigError("checkpoint: cannot open '" + path + "' for writing");
    out.write(kMagic, 8);
    for (const auto &e : reg.entries()) {
        write_u32(out, static_cast<uint32_t>(e.name.size()));
        out.write(e.name.data(), static_cast<std::streamsize>(e.name.size()));
        const Shape &s = e.tensor.shape();
        write_u32(out, static_cast<uint32_t>(s.size()));
        for (int d : s) write_u32(out, static_cast<uint32_t>(d));
        const auto &vals = e.tensor.data();
        out.write(reinterpret_cast<const char *>(vals.data()),
                  static_cast<std::streamsize>(vals.size() * sizeof(double)));
    }
    if (!out) throw ConfigError("checkpoint: write to '" + path + "' failed");
}

std::vector<std::pair<std::string, Tensor>> read_checkpoint_entries(const std::string &path) {
    std::ifstream in(path, std::ios::binary | std::ios::ate);
    if (!in) throw ConfigError("checkpoint: cannot open '" + path + "'");
    int64_t file_size = static_cast<int64_t>(in.tellg());
    in.seekg(0);
    char magic[8];
    if (file_size < 8 || !in.read(magic, 8) || std::memcmp(magic, kMagic, 8) != 0)
        throw ContractError("checkpoint: '" + path + "' has wrong magic bytes");
    int64_t remaining = file_size - 8;
    auto read_u32 = [&](const char *what) {
        uint32_t v;
        if (remaining < 4 || !in.read(reinterpret_cast<char *>(&v), 4))
            throw ContractError("checkpoint: truncated while reading " + std::string(what) +
                                " in '" + path + "'");
        remaining -= 4;
        return v;
    };

    std::vector<std::pair<std::string, Tensor>> entries;
    while (remaining > 0) {
        uint32_t name_len = read_u32("name length");
        if (name_len == 0 || name_len > 4096 || static_cast<int64_t>(name_len) > remaining)
            throw ContractError("checkpoint: implausible name length in '" + path + "'");
        std::string name(name_len, '\0');
        in.read(name.data(), name_len);
        remaining -= name_len;
        uint32_t rank = read_u32("rank");
        if (rank > 8) throw ContractError("checkpoint: implausible rank in '" + path + "'");
        Shape shape(rank);
        int64_t numel = 1;
        for (uint32_t i = 0; i < rank; ++i) {
            uint32_t d = read_u32("extent");
            if (d == 0) throw ContractError("checkpoint: zero extent in '" + path + "'");
            shape[i] = static_cast<int>(d);
            numel *= d;
        }
        int64_t bytes = numel * static_cast<int64_t>(sizeof(double));
        if (bytes > remaining)
            throw ContractError("checkpoint: entry '" + name + "' in '" + path +
                                "' claims more values than the file holds");
        std::vector<double> vals(static_cast<size_t>(numel));
        in.read(reinterpret_cast<char *>(vals.data()), bytes);
        remaining -= bytes;
        if (!in) throw ContractError("checkpoint: read failure in '" + path + "'");
        entries.emplace_back(name, Tensor(std::move(shape), std::move(vals)));
    }
    return entries;
}

size_t load_checkpoint(const std::string &path, ParamRegistry &reg, bool allow_missing_params) {
    auto file_entries = read_checkpoint_entries(path);
    size_t loaded = 0;
    std::vector<char> filled(reg.entries().size(), 0);
    for (const auto &[name, tensor] : file_entries) {
        bool matched = false;
        for (size_t i = 0; i < reg.entries().size(); ++i) {
            ParamEntry &e = reg.entries()[i];
            if (e.name != name) continue;
            if (e.tensor.shape() != tensor.shape())
                throw ContractError("checkpoint: '" + name + "' has shape " +
                                    shape_str(tensor.shape()) + " in '" + path +
                                    "' but the model expects " + shape_str(e.tensor.shape()));
            e.tensor.mutable_data() = tensor.data();
            filled[i] = 1;
            matched = true;
            ++loaded;
            break;
        }
        if (!matched)
            throw ContractError("checkpoint: '" + path + "' contains unknown entry '" + name +
                                "'");
    }
    if (!allow_missing_params) {
        for (size_t i = 0; i < reg.entries().size(); ++i)
            if (!filled[i])
                throw ContractError("checkpoint: '" + path + "' is missing entry '" +
                                    reg.entries()[i].name + "'");
    }
    return loaded;
}

}  // namespace focc
