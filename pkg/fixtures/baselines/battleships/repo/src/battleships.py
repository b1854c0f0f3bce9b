"""Battleships game skeleton; features land in dedicated modules."""


def main():
    print("battleships: nothing implemented yet")


if __name__ == "__main__":
    main()
