#include <cstdio>

int main() {
    // placeholder; wired up once the runner lands
    std::puts("sparta cli: not yet implemented");
    return 1;
}
