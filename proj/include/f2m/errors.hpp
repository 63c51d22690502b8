#pragma once

#include <stdexcept>
#include <string>

namespace f2m {

/// Base of every error raised by the library. `kind()` is a short stable tag
/// used by the CLI when it reports a failure.
class Error : public std::runtime_error {
public:
    Error(std::string kind, const std::string& what)
        : std::runtime_error(what), kind_(std::move(kind)) {}
    const std::string& kind() const noexcept { return kind_; }

private:
    std::string kind_;
};

#define F2M_DEFINE_ERROR(Name, tag)                                    \
    class Name : public Error {                                        \
    public:                                                            \
        explicit Name(const std::string& what) : Error(tag, what) {}   \
    };

F2M_DEFINE_ERROR(DimensionError, "dimension")
F2M_DEFINE_ERROR(IndexError, "index")
F2M_DEFINE_ERROR(ContractError, "contract")
F2M_DEFINE_ERROR(ConfigError, "config")
F2M_DEFINE_ERROR(StateError, "state")
F2M_DEFINE_ERROR(ProtocolError, "protocol")
F2M_DEFINE_ERROR(DivergenceError, "divergence")
F2M_DEFINE_ERROR(ParseError, "parse")
F2M_DEFINE_ERROR(EmptyClassError, "empty-class")
F2M_DEFINE_ERROR(DegeneratePrototypeError, "degenerate-prototype")

#undef F2M_DEFINE_ERROR

}  // namespace f2m
