#pragma once

#include <openssl/evp.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <memory>
#include <string>
#include <vector>

#include "refonce/tensor.hpp"

namespace refonce::tools {

/// SHA-256 over the sorted relative paths and contents of every regular file
/// below `root`: path, NUL, byte count, NUL, bytes.
inline std::string tree_sha256(const std::string& root) {
    namespace fs = std::filesystem;
    std::vector<std::string> files;
    for (const auto& e : fs::recursive_directory_iterator(root))
        if (e.is_regular_file()) files.push_back(fs::relative(e.path(), root).generic_string());
    std::sort(files.begin(), files.end());

    std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx(EVP_MD_CTX_new(), EVP_MD_CTX_free);
    if (!ctx || EVP_DigestInit_ex(ctx.get(), EVP_sha256(), nullptr) != 1) throw Error("SHA-256 init failed");
    auto feed = [&](const void* p, std::size_t n) {
        if (EVP_DigestUpdate(ctx.get(), p, n) != 1) throw Error("SHA-256 update failed");
    };
    for (const auto& rel : files) {
        std::ifstream f(fs::path(root) / rel, std::ios::binary);
        std::vector<char> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
        const std::string head = rel + '\0' + std::to_string(bytes.size()) + '\0';
        feed(head.data(), head.size());
        feed(bytes.data(), bytes.size());
    }
    unsigned char md[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    if (EVP_DigestFinal_ex(ctx.get(), md, &len) != 1) throw Error("SHA-256 final failed");
    static const char* hex = "0123456789abcdef";
    std::string out;
    for (unsigned int i = 0; i < len; ++i) {
        out += hex[md[i] >> 4];
        out += hex[md[i] & 15];
    }
    return out;
}

}  // namespace refonce::tools
