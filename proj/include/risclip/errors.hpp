#pragma once

#include <stdexcept>
#include <string>

namespace risclip {

// Bad input, bad config, bad file format. Maps to CLI exit code 1;
// everything else that escapes maps to exit code 2.
class ValidationError : public std::runtime_error {
public:
    explicit ValidationError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace risclip
