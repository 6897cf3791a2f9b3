from dafar.cli import main

main()
