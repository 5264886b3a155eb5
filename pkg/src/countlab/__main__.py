from countlab.cli import main

main()
