#pragma once

#include <functional>

#include "doctest.h"
#include "driftlab/error.hpp"

// Runs `fn` and returns the kind of the Error it throws; fails the test if it
// throws nothing.
inline driftlab::ErrorKind kind_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const driftlab::Error& e) {
    return e.kind();
  }
  FAIL("expected an error");
  return driftlab::ErrorKind::Io;
}

inline std::string message_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const driftlab::Error& e) {
    return e.what();
  }
  FAIL("expected an error");
  return {};
}
