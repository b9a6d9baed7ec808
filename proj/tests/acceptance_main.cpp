// Acceptance suite: one pass/fail line per criterion.
// Placeholder until the full stack is in; filled in last.
#include <cstdio>

int main() {
  std::printf("acceptance suite not implemented yet\n");
  return 1;
}
