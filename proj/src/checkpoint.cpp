#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>

#include "ctm/harness.hpp"
#include "ctm/serialize.hpp"

namespace ctm {

// Checkpoint file: CTMT tensor records back to back, one raw config-text
// blob, then a text manifest (tensor <key> <offset> <len> lines plus meta
// lines) and a fixed footer locating the manifest.

namespace {
constexpr char kFooterMagic[4] = {'C', 'T', 'M', 'M'};

void put_u64le(std::ostream& os, std::uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xFF);
    os.write(reinterpret_cast<const char*>(b), 8);
}

std::uint64_t get_u64le(const unsigned char* b) {
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    return v;
}
}  // namespace

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
    std::ostringstream body(std::ios::binary);
    std::ostringstream manifest;
    for (const auto& [key, tensor] : ckpt.tensors) {
        const auto offset = static_cast<std::uint64_t>(body.tellp());
        write_tensor(body, tensor);
        const auto end = static_cast<std::uint64_t>(body.tellp());
        manifest << "tensor " << key << " " << offset << " " << (end - offset) << "\n";
    }
    {
        const auto offset = static_cast<std::uint64_t>(body.tellp());
        body.write(ckpt.config_text.data(),
                   static_cast<std::streamsize>(ckpt.config_text.size()));
        manifest << "config " << offset << " " << ckpt.config_text.size() << "\n";
    }
    manifest << "meta version 1\n";
    manifest << "meta episode " << ckpt.episode << "\n";
    manifest << "meta adam_t " << ckpt.adam_t << "\n";
    manifest << "meta rng " << ckpt.rng_state[0] << " " << ckpt.rng_state[1] << " "
             << ckpt.rng_state[2] << " " << ckpt.rng_state[3] << "\n";
    {
        char buf[40];
        std::snprintf(buf, sizeof(buf), "%.17g", ckpt.best_val_acc);
        manifest << "meta best_val " << buf << "\n";
    }

    std::ofstream os(path, std::ios::binary);
    if (!os) throw SerializeError("cannot open " + path.string() + " for writing");
    const std::string body_s = body.str();
    const std::string man_s = manifest.str();
    os.write(body_s.data(), static_cast<std::streamsize>(body_s.size()));
    os.write(man_s.data(), static_cast<std::streamsize>(man_s.size()));
    put_u64le(os, body_s.size());
    put_u64le(os, man_s.size());
    os.write(kFooterMagic, 4);
    if (!os) throw SerializeError("checkpoint write failed: " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw SerializeError("cannot open checkpoint " + path.string());
    std::string blob((std::istreambuf_iterator<char>(is)),
                     std::istreambuf_iterator<char>());
    if (blob.size() < 20 ||
        std::memcmp(blob.data() + blob.size() - 4, kFooterMagic, 4) != 0)
        throw SerializeError("not a checkpoint file: " + path.string());
    const auto* tail = reinterpret_cast<const unsigned char*>(blob.data() + blob.size() - 20);
    const std::uint64_t man_off = get_u64le(tail);
    const std::uint64_t man_len = get_u64le(tail + 8);
    if (man_off + man_len + 20 != blob.size())
        throw SerializeError("corrupt checkpoint manifest: " + path.string());

    Checkpoint ckpt;
    bool saw_version = false;
    std::istringstream man(blob.substr(man_off, man_len));
    std::string line;
    while (std::getline(man, line)) {
        std::istringstream ls(line);
        std::string tag;
        ls >> tag;
        if (tag == "tensor") {
            std::string key;
            std::uint64_t off = 0, len = 0;
            ls >> key >> off >> len;
            std::istringstream rec(blob.substr(off, len), std::ios::binary);
            ckpt.tensors.emplace_back(key, read_tensor_f32(rec));
        } else if (tag == "config") {
            std::uint64_t off = 0, len = 0;
            ls >> off >> len;
            ckpt.config_text = blob.substr(off, len);
        } else if (tag == "meta") {
            std::string key;
            ls >> key;
            if (key == "version") {
                int v = 0;
                ls >> v;
                if (v != 1)
                    throw SerializeError("unsupported checkpoint version " +
                                         std::to_string(v));
                saw_version = true;
            } else if (key == "episode") {
                ls >> ckpt.episode;
            } else if (key == "adam_t") {
                ls >> ckpt.adam_t;
            } else if (key == "rng") {
                ls >> ckpt.rng_state[0] >> ckpt.rng_state[1] >> ckpt.rng_state[2] >>
                    ckpt.rng_state[3];
            } else if (key == "best_val") {
                ls >> ckpt.best_val_acc;
            }
        }
    }
    if (!saw_version) throw SerializeError("checkpoint missing version: " + path.string());
    return ckpt;
}

}  // namespace ctm
