#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>

#include "doctest.h"
#include "seer/errors.hpp"
#include "seer/rng.hpp"
#include "seer/tensor.hpp"
#include "seer/tensor_io.hpp"

using namespace seer;

namespace {

std::string temp_path(const char* name) {
    return std::string("seer_io_test_") + name + ".satr";
}

}  // namespace

TEST_CASE("tensor save and load round trips bit exact") {
    Rng rng(123);
    Tensor t({3, 5, 7});
    fill_gaussian(t, rng);
    std::stringstream buf;
    save_tensor(t, buf);
    Tensor back = load_tensor(buf);
    CHECK(back.shape == t.shape);
    CHECK(back.data == t.data);
}

TEST_CASE("tensor file round trip") {
    const std::string path = temp_path("roundtrip");
    Tensor t({4, 6});
    Rng rng(9);
    fill_gaussian(t, rng);
    save_tensor(t, path);
    Tensor back = load_tensor(path);
    CHECK(back.shape == t.shape);
    CHECK(back.data == t.data);
    std::remove(path.c_str());
}

TEST_CASE("load rejects bad magic") {
    std::stringstream buf;
    buf << "JUNKxxxxxxxxxxxxxxxxxxxxxxxx";
    CHECK_THROWS_AS(load_tensor(buf), DataError);
}

TEST_CASE("load rejects truncated payload") {
    Tensor t({2, 2});
    std::stringstream buf;
    save_tensor(t, buf);
    std::string bytes = buf.str();
    bytes.resize(bytes.size() - 5);
    std::stringstream cut(bytes);
    CHECK_THROWS_AS(load_tensor(cut), DataError);
}

TEST_CASE("load rejects unknown version") {
    Tensor t({2, 2});
    std::stringstream buf;
    save_tensor(t, buf);
    std::string bytes = buf.str();
    bytes[4] = 9;  // version field sits right after the 4 byte magic
    std::stringstream bad(bytes);
    CHECK_THROWS_AS(load_tensor(bad), DataError);
}

TEST_CASE("load of a missing file raises DataError") {
    CHECK_THROWS_AS(load_tensor(std::string("definitely_not_here.satr")), DataError);
}
